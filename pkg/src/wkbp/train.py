"""Training loop (MSE, Adam, global-norm clipping, NaN guard) and model comparison."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import AllStepsSkippedError, EmptyInputError, NonFiniteError
from .metrics import OUTPUTS, MetricsReport, metrics_from_predictions, read_csv, write_csv
from .model import KINDS, ModelConfig, Weights, check_kind, forward, init_weights, predict, validate_weights
from .signals import Beat, DatasetSplit, NormStats, beats_to_arrays, denormalize_labels, normalize_inputs, normalize_labels

log = logging.getLogger(__name__)

EPOCH_LOG_HEADER = ["epoch", "train_loss", "val_loss", "grad_norm", "skipped"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    early_stop_patience: int = 10

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    n_skipped_nonfinite: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


class EpochReport(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    grad_norm: float
    n_skipped_nonfinite: int


def mse_loss(pred, target) -> float:
    """Mean squared error over both outputs and every beat."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise NonFiniteError("mse_loss received non-finite input", where="mse_loss")
    return float(np.mean((pred - target) ** 2))


def all_finite(grads: Mapping[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    # fixed summation order so the value does not depend on dict order
    return math.sqrt(sum(float(np.vdot(grads[k], grads[k])) for k in sorted(grads)))


def clip_gradients(grads: Mapping[str, np.ndarray], clip_norm: float) -> Dict[str, np.ndarray]:
    """Rescale all gradients together so their global L2 norm is <= clip_norm."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads)
    s = clip_norm / norm
    return {k: g * s for k, g in grads.items()}


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> bool:
    """In-place bias-corrected Adam update.

    A step whose gradients contain inf/NaN is skipped entirely (parameters
    and moments untouched) and counted in ``state.n_skipped_nonfinite``.
    Returns whether the step was applied.
    """
    if not all_finite(grads):
        state.n_skipped_nonfinite += 1
        return False
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return True


GradHook = Callable[[int, int, Dict[str, np.ndarray]], None]
StepHook = Callable[[int, int, Weights], None]


class Trainer:
    """Stateful trainer so runs can be checkpointed and resumed exactly.

    Shuffling for epoch ``e`` draws from a generator seeded with
    ``(seed, e)``, so a resumed run replays the same batches.
    """

    def __init__(self, kind: str, split: DatasetSplit, tc: TrainConfig, mc: ModelConfig,
                 weights: Optional[Weights] = None):
        check_kind(kind)
        if not split.train or not split.val:
            raise EmptyInputError("train and val splits must be non-empty")
        self.kind, self.tc, self.mc = kind, tc, mc
        self.norm: NormStats = split.norm
        X, Y = beats_to_arrays(split.train)
        self.X_train, self.Y_train = normalize_inputs(X, self.norm), normalize_labels(Y, self.norm)
        X, Y = beats_to_arrays(split.val)
        self.X_val, self.Y_val = normalize_inputs(X, self.norm), normalize_labels(Y, self.norm)
        self.weights = init_weights(mc, mc.seed, kind) if weights is None else {k: v.copy() for k, v in weights.items()}
        validate_weights(self.weights, mc, kind)
        self.adam = AdamState.zeros_like(self.weights)
        self.epoch = 0
        self.best_val = math.inf
        self.best_weights = {k: v.copy() for k, v in self.weights.items()}
        self.bad_epochs = 0
        self.stopped = False
        self.reports: List[EpochReport] = []

    def loss_and_grads(self, Xb, Yb):
        tape = ad.Tape()
        P = tape.variables(self.weights)
        out = forward(tape, P, Xb, self.mc, self.kind)
        loss = ad.mean_squared_error(out.pred, Yb)
        if not np.isfinite(loss.data):
            raise NonFiniteError("non-finite loss", where="loss")
        return float(loss.data), ad.backward(loss)

    def val_loss(self) -> float:
        try:
            pred = predict(self.weights, self.X_val, self.mc, self.kind)
        except NonFiniteError as exc:
            log.warning("epoch %d validation: %s", self.epoch, exc)
            return math.inf
        return float(np.mean((pred - self.Y_val) ** 2))

    def run_epoch(self, grad_hook: Optional[GradHook] = None, step_hook: Optional[StepHook] = None) -> EpochReport:
        tc = self.tc
        rng = np.random.default_rng([tc.seed, self.epoch])
        order = rng.permutation(len(self.X_train))
        skipped_before = self.adam.n_skipped_nonfinite
        loss_sum, n_seen, norms, n_steps = 0.0, 0, [], 0
        for step, s in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[s:s + tc.batch_size]
            n_steps += 1
            try:
                loss, grads = self.loss_and_grads(self.X_train[idx], self.Y_train[idx])
            except NonFiniteError as exc:
                log.warning("epoch %d step %d: %s; step skipped", self.epoch, step, exc)
                self.adam.n_skipped_nonfinite += 1
                continue
            if grad_hook is not None:
                grad_hook(self.epoch, step, grads)
            if not all_finite(grads):
                adam_step(self.weights, grads, self.adam, tc)
                continue
            norms.append(global_norm(grads))
            adam_step(self.weights, clip_gradients(grads, tc.clip_norm), self.adam, tc)
            loss_sum += loss * len(idx)
            n_seen += len(idx)
            if step_hook is not None:
                step_hook(self.epoch, step, self.weights)
        skipped = self.adam.n_skipped_nonfinite - skipped_before
        if skipped == n_steps:
            raise AllStepsSkippedError(
                f"epoch {self.epoch}: all {n_steps} steps hit the non-finite guard; last good weights kept")
        val = self.val_loss()
        report = EpochReport(self.epoch, loss_sum / n_seen, val, float(np.mean(norms)), skipped)
        self.reports.append(report)
        if val < self.best_val:
            self.best_val = val
            self.best_weights = {k: v.copy() for k, v in self.weights.items()}
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= tc.early_stop_patience:
                self.stopped = True
        self.epoch += 1
        return report

    def run(self, epochs: Optional[int] = None, grad_hook: Optional[GradHook] = None,
            step_hook: Optional[StepHook] = None) -> List[EpochReport]:
        """Train until ``epochs`` total epochs are done or early stopping fires."""
        target = self.tc.epochs if epochs is None else epochs
        new = []
        while self.epoch < target and not self.stopped:
            rep = self.run_epoch(grad_hook, step_hook)
            log.info("[%s] epoch %d train %.5f val %.5f |g| %.3f skipped %d", self.kind, rep.epoch,
                     rep.train_loss, rep.val_loss, rep.grad_norm, rep.n_skipped_nonfinite)
            new.append(rep)
        return new


def train(kind: str, split: DatasetSplit, tc: TrainConfig, mc: ModelConfig, **hooks):
    """Train a model and return (best-val weights, epoch reports)."""
    trainer = Trainer(kind, split, tc, mc)
    trainer.run(**hooks)
    return trainer.best_weights, trainer.reports


def write_epoch_log(path, reports: Sequence[EpochReport]):
    rows = [{"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss,
             "grad_norm": r.grad_norm, "skipped": r.n_skipped_nonfinite} for r in reports]
    write_csv(path, EPOCH_LOG_HEADER, rows)


def read_epoch_log(path) -> List[EpochReport]:
    return [EpochReport(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                        float(r["grad_norm"]), int(r["skipped"])) for r in read_csv(path, EPOCH_LOG_HEADER)]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_mmHg(weights: Weights, kind: str, beats: Sequence[Beat], norm: NormStats, mc: ModelConfig):
    """Return (predictions, targets) in mmHg as (n, 2) arrays."""
    X, Y = beats_to_arrays(beats)
    pred = predict(weights, normalize_inputs(X, norm), mc, kind)
    return denormalize_labels(pred, norm), Y


def evaluate(weights: Weights, kind: str, test: Sequence[Beat], norm: NormStats,
             mc: Optional[ModelConfig] = None) -> MetricsReport:
    if not test:
        raise EmptyInputError("test set is empty")
    pred, true = predict_mmHg(weights, kind, test, norm, mc or ModelConfig())
    return metrics_from_predictions(pred, true)


COMPARISON_HEADER = ["output", "model_a", "model_b", "mae_a", "mae_b", "delta", "relative_reduction"]


@dataclass
class Comparison:
    model_a: str
    model_b: str
    reports: Dict[str, MetricsReport] = field(default_factory=dict)
    epochs: Dict[str, List[EpochReport]] = field(default_factory=dict)
    weights: Dict[str, Weights] = field(default_factory=dict)

    def rows(self) -> List[dict]:
        """``delta`` = MAE(b) - MAE(a); positive means model a is better."""
        out = []
        for name in OUTPUTS:
            a = getattr(self.reports[self.model_a], name).mae
            b = getattr(self.reports[self.model_b], name).mae
            delta = b - a
            rel = delta / b if b > 0 else 0.0
            out.append({"output": name, "model_a": self.model_a, "model_b": self.model_b,
                        "mae_a": a, "mae_b": b, "delta": delta, "relative_reduction": rel})
        return out


def compare_models(split: DatasetSplit, tc: TrainConfig, mc: ModelConfig,
                   kinds=("hybrid", "baseline")) -> Comparison:
    """Train both kinds under identical seeds and config, evaluate on test."""
    a, b = kinds
    for k in kinds:
        check_kind(k)
    cmp = Comparison(a, b)
    for kind in dict.fromkeys(kinds):
        w, reps = train(kind, split, tc, mc)
        cmp.weights[kind] = w
        cmp.epochs[kind] = reps
        cmp.reports[kind] = evaluate(w, kind, split.test, split.norm, mc)
    return cmp


def write_comparison(path, rows: Sequence[dict]):
    write_csv(path, COMPARISON_HEADER, rows)


def read_comparison(path) -> List[dict]:
    out = []
    for r in read_csv(path, COMPARISON_HEADER):
        out.append({"output": r["output"], "model_a": r["model_a"], "model_b": r["model_b"],
                    **{k: float(r[k]) for k in ("mae_a", "mae_b", "delta", "relative_reduction")}})
    return out


# ---------------------------------------------------------------------------
# checkpoint / resume
# ---------------------------------------------------------------------------

def trainer_checkpoint(trainer: Trainer, meta: Optional[dict] = None):
    """Checkpoint holding best weights plus everything needed to resume."""
    from dataclasses import asdict

    from .checkpoint import Checkpoint

    state = {
        "epoch": trainer.epoch,
        "adam_t": trainer.adam.t,
        "n_skipped_nonfinite": trainer.adam.n_skipped_nonfinite,
        "best_val": trainer.best_val if math.isfinite(trainer.best_val) else None,
        "bad_epochs": trainer.bad_epochs,
        "stopped": trainer.stopped,
        "reports": [list(r) for r in trainer.reports],
        "train_config": asdict(trainer.tc),
    }
    groups = {"current": trainer.weights, "adam_m": trainer.adam.m, "adam_v": trainer.adam.v}
    return Checkpoint(trainer.kind, trainer.mc, trainer.best_weights, trainer.norm,
                      {**(meta or {}), "trainer": state}, groups)


def resume_trainer(ckpt, split: DatasetSplit, tc: TrainConfig) -> Trainer:
    """Rebuild a :class:`Trainer` from :func:`trainer_checkpoint` output.

    ``tc`` may raise ``epochs``; the other fields should match the original
    run for the continuation to be identical.
    """
    state = ckpt.meta.get("trainer")
    if state is None or "current" not in ckpt.groups:
        raise ValueError("checkpoint carries no trainer state")
    tr = Trainer(ckpt.kind, split, tc, ckpt.config, weights=ckpt.groups["current"])
    tr.norm = ckpt.norm if ckpt.norm is not None else tr.norm
    tr.adam = AdamState({k: v.copy() for k, v in ckpt.groups["adam_m"].items()},
                        {k: v.copy() for k, v in ckpt.groups["adam_v"].items()},
                        state["adam_t"], state["n_skipped_nonfinite"])
    tr.epoch = state["epoch"]
    tr.best_val = math.inf if state["best_val"] is None else state["best_val"]
    tr.best_weights = {k: v.copy() for k, v in ckpt.weights.items()}
    tr.bad_epochs = state["bad_epochs"]
    tr.stopped = state["stopped"]
    tr.reports = [EpochReport(int(r[0]), *map(float, r[1:4]), int(r[4])) for r in state["reports"]]
    return tr
