"""LSTM encoder, Windkessel parameter head, latent ODE and decoder.

Three model kinds share the same building blocks:

``hybrid``
    z0 = LSTM(beat); theta = head(z0); (r_p, r_d, c) = exp(clamp(theta));
    z1 = RK4 solve of  c dz/dt = -z/r_d - r_p z + f_comp(z)  over [0, 1];
    output = decoder([z1, r_p, r_d, c]).
``baseline``
    as hybrid with the ODE skipped (z1 = z0); f_comp is not used.
``plain``
    decoder(z0); neither the parameter head nor f_comp is used.

Weights are a flat ``{name: ndarray}`` mapping. Batches are rows: a beat
batch ``X`` has shape (n, 75, 2) and predictions have shape (n, 2).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ShapeMismatchError

KINDS = ("hybrid", "baseline", "plain")
THETA_MIN, THETA_MAX = -6.0, 6.0
HEAD_BIAS_INIT = (math.log(0.05), math.log(1.0), math.log(1.2))
GATES = ("i", "f", "g", "o")

Weights = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 75
    in_channels: int = 2
    latent_dim: int = 128
    f_comp_hidden: int = 128
    decoder_hidden: int = 64
    ode_steps: int = 8
    seed: int = 0

    def __post_init__(self):
        for k in ("seq_len", "in_channels", "latent_dim", "f_comp_hidden", "decoder_hidden", "ode_steps"):
            if int(getattr(self, k)) < 1:
                raise ValueError(f"{k} must be >= 1, got {getattr(self, k)}")

    @property
    def is_reference_size(self) -> bool:
        return self.seq_len == 75 and self.latent_dim == 128


def check_kind(kind: str):
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


def param_shapes(config: ModelConfig, kind: str = "hybrid") -> Dict[str, tuple]:
    """Name -> shape for every trainable array of ``kind``.

    Matrices are stored (fan_in, fan_out) because rows carry the batch.
    """
    check_kind(kind)
    H, I = config.latent_dim, config.in_channels
    shapes: Dict[str, tuple] = {}
    for g in GATES:
        shapes[f"lstm.W_{g}"] = (I, H)
        shapes[f"lstm.U_{g}"] = (H, H)
        shapes[f"lstm.b_{g}"] = (H,)
    if kind != "plain":
        shapes["head.W"] = (H, 3)
        shapes["head.b"] = (3,)
    if kind == "hybrid":
        shapes["fcomp.W1"] = (H, config.f_comp_hidden)
        shapes["fcomp.b1"] = (config.f_comp_hidden,)
        shapes["fcomp.W2"] = (config.f_comp_hidden, H)
        shapes["fcomp.b2"] = (H,)
    dec_in = H if kind == "plain" else H + 3
    shapes["dec.W1"] = (dec_in, config.decoder_hidden)
    shapes["dec.b1"] = (config.decoder_hidden,)
    shapes["dec.W2"] = (config.decoder_hidden, 2)
    shapes["dec.b2"] = (2,)
    return shapes


def _fan_in(name: str, shapes) -> int:
    shape = shapes[name]
    if len(shape) == 2:
        return shape[0]
    # a bias takes the fan-in of the matrix feeding it; for LSTM gates that
    # is the recurrent matrix
    prefix, tail = name.rsplit(".", 1)
    if prefix == "lstm":
        return shapes["lstm.U_" + tail[-1]][0]
    return shapes[f"{prefix}.W{tail[1:]}"][0]


def init_weights(config: ModelConfig, seed: Optional[int] = None, kind: str = "hybrid") -> Weights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.

    Each array draws from its own stream keyed by (seed, name), so arrays
    shared between model kinds start identical. The forget-gate bias is 1
    and the head bias puts the initial Windkessel parameters at
    (0.05, 1.0, 1.2).
    """
    seed = config.seed if seed is None else seed
    shapes = param_shapes(config, kind)
    weights: Weights = {}
    for name, shape in shapes.items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        s = 1.0 / math.sqrt(_fan_in(name, shapes))
        weights[name] = rng.uniform(-s, s, size=shape)
    weights["lstm.b_f"] = np.ones(config.latent_dim)
    if kind != "plain":
        weights["head.b"] = np.array(HEAD_BIAS_INIT)
    return weights


def validate_weights(weights: Weights, config: ModelConfig, kind: str):
    shapes = param_shapes(config, kind)
    missing = set(shapes) - set(weights)
    if missing:
        raise ShapeMismatchError(f"missing weights: {sorted(missing)}")
    for name, shape in shapes.items():
        if tuple(weights[name].shape) != shape:
            raise ShapeMismatchError(f"{name}: shape {weights[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# building blocks on tensors
# ---------------------------------------------------------------------------

def lstm_encode(tape: Tape, P: Dict[str, Tensor], X: np.ndarray) -> Tensor:
    """Run a single-layer LSTM over the time axis of X and return h_T."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    n, T, I = X.shape
    if I != P["lstm.W_i"].shape[0]:
        raise ShapeMismatchError(f"input has {I} channels, weights expect {P['lstm.W_i'].shape[0]}")
    H = P["lstm.U_i"].shape[0]
    W = ad.concat([P[f"lstm.W_{g}"] for g in GATES], axis=1)
    U = ad.concat([P[f"lstm.U_{g}"] for g in GATES], axis=1)
    b = ad.concat([P[f"lstm.b_{g}"] for g in GATES], axis=0)
    h = c = None
    for t in range(T):
        pre = tape.constant(X[:, t, :]) @ W + b
        if h is not None:
            pre = pre + h @ U
        i = ad.sigmoid(pre[:, :H])
        f = ad.sigmoid(pre[:, H:2 * H])
        g = ad.tanh(pre[:, 2 * H:3 * H])
        o = ad.sigmoid(pre[:, 3 * H:])
        c = i * g if c is None else f * c + i * g
        h = o * ad.tanh(c)
    return h


def param_head(P: Dict[str, Tensor], z: Tensor):
    """Log-parameters theta and the positive (r_p, r_d, c) columns."""
    theta = z @ P["head.W"] + P["head.b"]
    params = ad.exp(ad.clip(theta, THETA_MIN, THETA_MAX))
    return theta, params


def f_comp(P: Dict[str, Tensor], z: Tensor) -> Tensor:
    return ad.tanh(z @ P["fcomp.W1"] + P["fcomp.b1"]) @ P["fcomp.W2"] + P["fcomp.b2"]


def latent_ode_rhs(z: Tensor, r_p: Tensor, r_d: Tensor, c: Tensor, P: Dict[str, Tensor]) -> Tensor:
    """dz/dt from  c dz/dt = -z/r_d - r_p z + f_comp(z).

    ``r_p``, ``r_d`` and ``c`` are (n, 1) columns broadcast over the latent
    dimensions.
    """
    return (-z / r_d - r_p * z + f_comp(P, z)) / c


def decode(P: Dict[str, Tensor], x: Tensor) -> Tensor:
    return ad.tanh(x @ P["dec.W1"] + P["dec.b1"]) @ P["dec.W2"] + P["dec.b2"]


class Forward(NamedTuple):
    pred: Tensor  # (n, 2) normalized SBP, DBP
    theta: Optional[Tensor]
    params: Optional[Tensor]  # (n, 3) r_p, r_d, c
    z0: Tensor
    z_final: Tensor


def forward(tape: Tape, P: Dict[str, Tensor], X: np.ndarray, config: ModelConfig,
            kind: str = "hybrid", theta: Optional[np.ndarray] = None) -> Forward:
    """Full forward pass on a batch; ``theta`` pins the log-parameters."""
    check_kind(kind)
    if config.ode_steps < 1:
        raise ValueError("ode_steps must be >= 1")
    z0 = lstm_encode(tape, P, X)
    if kind == "plain":
        return Forward(decode(P, z0), None, None, z0, z0)
    if theta is None:
        th, params = param_head(P, z0)
    else:
        th = tape.constant(np.broadcast_to(np.asarray(theta, dtype=np.float64), (z0.shape[0], 3)))
        params = ad.exp(ad.clip(th, THETA_MIN, THETA_MAX))
    if kind == "hybrid":
        r_p, r_d, c = params[:, 0:1], params[:, 1:2], params[:, 2:3]
        z1 = ad.rk4_integrate(lambda z: latent_ode_rhs(z, r_p, r_d, c, P), z0, (0.0, 1.0), config.ode_steps)
    else:
        z1 = z0
    dec_in = ad.concat([z1, params], axis=1)
    if dec_in.shape[1] != config.latent_dim + 3:
        raise ShapeMismatchError(f"decoder input width {dec_in.shape[1]} != latent_dim + 3")
    return Forward(decode(P, dec_in), th, params, z0, z1)


# ---------------------------------------------------------------------------
# numpy-level wrappers
# ---------------------------------------------------------------------------

@dataclass
class ModelOutput:
    sbp_norm: float
    dbp_norm: float
    params: Optional[tuple]  # (r_p, r_d, c)
    z_final: np.ndarray
    theta: Optional[np.ndarray] = None


def _constants(tape: Tape, weights: Weights) -> Dict[str, Tensor]:
    return {k: tape.constant(v) for k, v in weights.items()}


def model_forward(beat, weights: Weights, config: ModelConfig, kind: str = "hybrid",
                  theta=None) -> ModelOutput:
    """Evaluate one normalized beat (75 x 2 array or BeatMatrix)."""
    values = getattr(beat, "values", beat)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (config.seq_len, config.in_channels):
        raise ShapeMismatchError(f"beat shape {values.shape}, expected {(config.seq_len, config.in_channels)}")
    tape = Tape(grad=False)
    out = forward(tape, _constants(tape, weights), values[None], config, kind, theta)
    pred = out.pred.data[0]
    params = tuple(float(v) for v in out.params.data[0]) if out.params is not None else None
    theta_arr = out.theta.data[0].copy() if out.theta is not None else None
    return ModelOutput(float(pred[0]), float(pred[1]), params, out.z_final.data[0].copy(), theta_arr)


def baseline_forward(beat, weights: Weights, config: ModelConfig, variant: str = "baseline",
                     theta=None) -> ModelOutput:
    if variant not in ("baseline", "plain"):
        raise ValueError("variant must be 'baseline' or 'plain'")
    return model_forward(beat, weights, config, variant, theta)


def predict(weights: Weights, X: np.ndarray, config: ModelConfig, kind: str = "hybrid",
            batch_size: int = 256, return_params: bool = False):
    """Normalized predictions (n, 2) for a stack of normalized beats."""
    preds, params = [], []
    for s in range(0, len(X), batch_size):
        tape = Tape(grad=False)
        out = forward(tape, _constants(tape, weights), X[s:s + batch_size], config, kind)
        preds.append(out.pred.data)
        if out.params is not None:
            params.append(out.params.data)
    P = np.concatenate(preds) if preds else np.zeros((0, 2))
    if return_params:
        return P, (np.concatenate(params) if params else None)
    return P
