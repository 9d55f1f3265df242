"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Every tensor belongs to a :class:`Tape`. Operations append a node holding
the parent ids and a closure mapping the output gradient to the parent
gradients; :func:`backward` walks the tape in exact reverse order.

Tensors are rank 0, 1 or 2. Rank-2 tensors are laid out ``(batch, features)``
so a whole mini-batch of beats shares one tape.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import NonFiniteError, NonScalarLossError, ShapeMismatchError

Array = np.ndarray


class Tensor:
    __slots__ = ("data", "tape", "idx", "requires_grad", "name")

    def __init__(self, data, tape, idx, requires_grad, name=None):
        self.data = data
        self.tape = tape
        self.idx = idx
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> Array:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """Ordered record of operations.

    With ``grad=False`` nothing is recorded and no closures are built, which
    is the fast path for inference and finite-difference probes. With
    ``debug=True`` every op output is checked for finiteness.
    """

    def __init__(self, grad: bool = True, debug: bool = False):
        self.grad = grad
        self.debug = debug
        self._parents: list = []
        self._backward: list = []
        self._names: Dict[int, str] = {}
        self._shapes: Dict[int, tuple] = {}

    def __len__(self):
        return len(self._parents)

    def _node(self, data, parents=(), backward=None, name=None, requires_grad=False):
        idx = len(self._parents)
        if self.grad and requires_grad:
            self._parents.append(parents)
            self._backward.append(backward)
        else:
            self._parents.append(())
            self._backward.append(None)
        return Tensor(data, self, idx, self.grad and requires_grad, name)

    def constant(self, value) -> Tensor:
        return self._node(np.asarray(value, dtype=np.float64))

    def variable(self, value, name: Optional[str] = None) -> Tensor:
        data = np.asarray(value, dtype=np.float64)
        if data.ndim > 2:
            raise ShapeMismatchError(f"rank {data.ndim} > 2 not supported")
        t = self._node(data, name=name, requires_grad=True)
        if name is None:
            name = t.name = f"_v{t.idx}"
        self._names[t.idx] = name
        self._shapes[t.idx] = data.shape
        return t

    def variables(self, params: Mapping[str, Array]) -> Dict[str, Tensor]:
        return {k: self.variable(v, k) for k, v in params.items()}


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _record(tape: Tape, op: str, data, parents, backward) -> Tensor:
    if tape.debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}", where=op)
    needs = any(p.requires_grad for p in parents)
    return tape._node(data, tuple(p.idx for p in parents), backward, requires_grad=needs)


def _unbroadcast(g: Array, shape) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a: Array, b: Array):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(tape, "add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(tape, "sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _record(tape, "mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(tape, "div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(a.tape, "scale", a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeMismatchError(f"matmul: {ad.shape} @ {bd.shape}")
    return _record(tape, "matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(a.tape, "tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(a.tape, "sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(a.tape, "exp", y, (a,), lambda g: (g * y,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record(a.tape, "clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tape = _tape_of(*tensors)
    ts = [_as_tensor(t, tape) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(tape, "concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a: Tensor, key) -> Tensor:
    shape = a.shape
    out = a.data[key]

    def back(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _record(a.tape, "slice", out, (a,), back)


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(a.tape, "sum", np.sum(a.data), (a,), lambda g: (np.full(shape, g),))


def mean_squared_error(pred, target) -> Tensor:
    """Mean of squared differences over every entry."""
    tape = _tape_of(pred, target)
    pred, target = _as_tensor(pred, tape), _as_tensor(target, tape)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    coef = 2.0 / n
    return _record(tape, "mse", np.mean(diff * diff), (pred, target),
                   lambda g: (g * coef * diff, -g * coef * diff))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, store: Optional["ParamStore"] = None) -> Dict[str, Array]:
    """Propagate d(loss)/d(node) back through the tape.

    Returns gradients for every named variable; when ``store`` is given they
    are also accumulated into ``store.grads``. A variable used several times
    receives the sum of its contributions.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    n = loss.idx + 1
    grads: list = [None] * n
    grads[loss.idx] = np.ones_like(loss.data)
    parents, backs, names = tape._parents, tape._backward, tape._names
    out: Dict[str, Array] = {}
    for i in range(n - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        if i in names:
            name = names[i]
            out[name] = out[name] + g if name in out else g
        fn = backs[i]
        if fn is None:
            continue
        grads[i] = None
        for p, pg in zip(parents[i], fn(g)):
            if backs[p] is None and p not in names:
                continue
            grads[p] = pg if grads[p] is None else grads[p] + pg
    for i, name in names.items():
        if name not in out:
            out[name] = np.zeros(tape._shapes[i])
    if store is not None:
        store.accumulate(out)
    return out


class ParamStore:
    """Named trainable arrays plus same-shaped gradient accumulators."""

    def __init__(self, params: Mapping[str, Array]):
        self.params: Dict[str, Array] = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.grads: Dict[str, Array] = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: Mapping[str, Array]):
        for k, g in grads.items():
            if k in self.grads:
                if g.shape != self.grads[k].shape:
                    raise ShapeMismatchError(f"gradient for {k}: {g.shape} vs {self.grads[k].shape}")
                self.grads[k] += g

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def n_values(self) -> int:
        return sum(v.size for v in self.params.values())


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

LossFn = Callable[[Tape, Dict[str, Tensor]], Tensor]


def grad_check(f: LossFn, params: Mapping[str, Array], eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f(tape, tensors)`` must return a scalar tensor. With ``max_coords`` only
    that many randomly chosen coordinates per parameter are probed, which
    keeps the check affordable for large models.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    analytic = backward(f(tape, tape.variables(params)))
    rng = np.random.default_rng(seed)

    def value():
        t = Tape(grad=False)
        return float(f(t, {k: t.constant(v) for k, v in params.items()}).data)

    worst = 0.0
    for name, arr in params.items():
        ga = analytic.get(name, np.zeros_like(arr)).reshape(-1)
        flat = arr.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            fp = value()
            flat[j] = orig - eps
            fm = value()
            flat[j] = orig
            gfd = (fp - fm) / (2.0 * eps)
            err = abs(ga[j] - gfd) / max(1e-8, abs(ga[j]) + abs(gfd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# fixed-step Runge-Kutta
# ---------------------------------------------------------------------------

def _finite(x) -> bool:
    data = x.data if isinstance(x, Tensor) else x
    return bool(np.all(np.isfinite(data)))


def rk4_step(f, t: float, y, h: float):
    """One classical RK4 step for dy/dt = f(t, y).

    Works on floats, numpy arrays and tensors alike. Returns the new state
    and the four stage slopes.
    """
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + (0.5 * h) * k1)
    k3 = f(t + 0.5 * h, y + (0.5 * h) * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), (k1, k2, k3, k4)


def rk4_integrate(rhs, z0, t_span=(0.0, 1.0), n_steps: int = 8):
    """Integrate dz/dt = rhs(z) over ``t_span`` with ``n_steps`` RK4 steps.

    When ``z0`` is a tensor the whole unrolled solve is recorded on its tape,
    so gradients flow through every stage. Raises :class:`NonFiniteError`
    naming the step and stage at the first non-finite intermediate.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    t0, t1 = t_span
    h = (t1 - t0) / n_steps
    z = z0
    for step in range(n_steps):
        z, stages = rk4_step(lambda _t, y: rhs(y), t0 + step * h, z, h)
        for name, k in zip(("k1", "k2", "k3", "k4"), stages):
            if not _finite(k):
                raise NonFiniteError(f"non-finite {name} at RK4 step {step}", where=name, step=step)
        if not _finite(z):
            raise NonFiniteError(f"non-finite state after RK4 step {step}", where="state", step=step)
    return z
