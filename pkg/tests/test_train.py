import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wkbp.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from wkbp.errors import AllStepsSkippedError, CheckpointError, EmptyInputError, NonFiniteError
from wkbp.model import ModelConfig, init_weights
from wkbp.signals import split_dataset
from wkbp.train import (AdamState, Comparison, TrainConfig, Trainer, adam_step, clip_gradients, compare_models,
                        evaluate, global_norm, mse_loss, read_comparison, read_epoch_log, resume_trainer, train,
                        trainer_checkpoint, write_comparison, write_epoch_log)

# --- loss ------------------------------------------------------------------------


def test_mse_examples():
    assert mse_loss([[0.3, -0.2]], [[0.3, -0.2]]) == 0.0
    assert mse_loss([[1.0, 1.0]], [[0.0, 0.0]]) == 1.0
    assert mse_loss([[0.0, 0.0], [1.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]) == 0.5


def test_mse_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        mse_loss([[np.nan, 0.0]], [[0.0, 0.0]])


# --- Adam ------------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    before = p["w"].copy()
    st_ = AdamState.zeros_like(p)
    for _ in range(3):
        assert adam_step(p, {"w": np.zeros(3)}, st_, TrainConfig())
    assert np.array_equal(p["w"], before)
    assert np.array_equal(st_.m["w"], np.zeros(3)) and np.array_equal(st_.v["w"], np.zeros(3))


def test_adam_first_step_hand_value():
    p = {"th": np.array([0.0])}
    s = AdamState.zeros_like(p)
    adam_step(p, {"th": np.array([1.0])}, s, TrainConfig(lr=0.1))
    m_hat = 0.1 / (1 - 0.9)
    v_hat = 0.001 / (1 - 0.999)
    expected = -0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p["th"][0] == pytest.approx(expected, abs=1e-15)
    assert p["th"][0] == pytest.approx(-0.09999999, abs=1e-8)
    assert s.t == 1


def test_adam_guard_skips_nonfinite():
    p = {"a": np.array([1.0, 2.0]), "b": np.array([3.0])}
    s = AdamState.zeros_like(p)
    adam_step(p, {"a": np.ones(2), "b": np.ones(1)}, s, TrainConfig())
    snap = {k: v.copy() for k, v in p.items()}
    m = {k: v.copy() for k, v in s.m.items()}
    applied = adam_step(p, {"a": np.array([np.nan, 1.0]), "b": np.ones(1)}, s, TrainConfig())
    assert not applied and s.n_skipped_nonfinite == 1 and s.t == 1
    assert all(np.array_equal(p[k], snap[k]) for k in p)
    assert all(np.array_equal(s.m[k], m[k]) for k in m)


def test_train_config_validation():
    for bad in ({"lr": 0}, {"adam_beta1": 1.0}, {"clip_norm": 0}, {"batch_size": 0}, {"epochs": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- clipping --------------------------------------------------------------------


def test_clip_small_unchanged():
    g = {"a": np.array([0.3, 0.4])}
    assert np.array_equal(clip_gradients(g, 1.0)["a"], g["a"])


def test_clip_three_four():
    assert np.allclose(clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)["a"], [0.6, 0.8], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-3, 10))
def test_clip_bounds_global_norm(seed, clip):
    rng = np.random.default_rng(seed)
    g = {f"p{i}": rng.normal(0, rng.uniform(0.01, 50), rng.integers(1, 6, size=rng.integers(1, 3)))
         for i in range(4)}
    out = clip_gradients(g, clip)
    assert global_norm(out) <= clip + 1e-9
    if global_norm(g) <= clip:
        assert all(np.array_equal(out[k], g[k]) for k in g)


# --- training loop -----------------------------------------------------------------


@pytest.fixture
def split(small_beats):
    return split_dataset(small_beats, (0.6, 0.2, 0.2), seed=0)


def test_zero_epochs_returns_initial_weights(split, tiny_config):
    w, reps = train("hybrid", split, TrainConfig(epochs=0), tiny_config)
    init = init_weights(tiny_config, tiny_config.seed, "hybrid")
    assert reps == [] and all(np.array_equal(w[k], init[k]) for k in init)


def test_training_is_deterministic(split, tiny_config):
    tc = TrainConfig(epochs=3, batch_size=8, seed=4)
    w1, r1 = train("hybrid", split, tc, tiny_config)
    w2, r2 = train("hybrid", split, tc, tiny_config)
    assert r1 == r2
    assert all(np.array_equal(w1[k], w2[k]) for k in w1)


def test_training_reduces_loss(split, tiny_config):
    _, reps = train("baseline", split, TrainConfig(epochs=8, batch_size=8, lr=1e-2), tiny_config)
    assert reps[-1].train_loss < reps[0].train_loss
    assert all(math.isfinite(r.train_loss) and math.isfinite(r.val_loss) for r in reps)


def test_early_stopping(split, tiny_config):
    tc = TrainConfig(epochs=50, batch_size=8, lr=0.5, early_stop_patience=2)
    tr = Trainer("plain", split, tc, tiny_config)
    tr.run()
    assert tr.stopped and len(tr.reports) < 50
    best = min(r.val_loss for r in tr.reports)
    assert tr.best_val == best


def test_empty_split_rejected(split, tiny_config):
    split.val = []
    with pytest.raises(EmptyInputError):
        Trainer("hybrid", split, TrainConfig(), tiny_config)


def test_invalid_kind(split, tiny_config):
    with pytest.raises(ValueError):
        Trainer("bogus", split, TrainConfig(), tiny_config)


def test_nan_guard_injection(split, tiny_config):
    tc = TrainConfig(epochs=4, batch_size=8)
    tr = Trainer("hybrid", split, tc, tiny_config)
    injected = []

    def inject(epoch, step, grads):
        if step == 1:
            grads["dec.b2"][0] = np.nan
            injected.append((epoch, step))

    def watch(epoch, step, weights):
        assert all(np.all(np.isfinite(v)) for v in weights.values())

    tr.run(grad_hook=inject, step_hook=watch)
    assert tr.adam.n_skipped_nonfinite == len(injected) == 4
    assert [r.n_skipped_nonfinite for r in tr.reports] == [1, 1, 1, 1]


def test_all_steps_skipped_aborts(split, tiny_config):
    tr = Trainer("hybrid", split, TrainConfig(epochs=2, batch_size=8), tiny_config)
    before = {k: v.copy() for k, v in tr.weights.items()}

    def poison(epoch, step, grads):
        grads["dec.b2"][:] = np.inf

    with pytest.raises(AllStepsSkippedError):
        tr.run(grad_hook=poison)
    assert all(np.array_equal(tr.weights[k], before[k]) for k in before)


def test_epoch_log_round_trip(tmp_path, split, tiny_config):
    _, reps = train("hybrid", split, TrainConfig(epochs=2, batch_size=8), tiny_config)
    write_epoch_log(tmp_path / "log.csv", reps)
    assert read_epoch_log(tmp_path / "log.csv") == reps
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,grad_norm,skipped"


# --- evaluation and comparison ------------------------------------------------------


def test_evaluate_empty(split, tiny_config):
    with pytest.raises(EmptyInputError):
        evaluate(init_weights(tiny_config, 0), "hybrid", [], split.norm, tiny_config)


def test_identical_kinds_have_zero_delta(split, tiny_config):
    cmp = compare_models(split, TrainConfig(epochs=1, batch_size=8), tiny_config, kinds=("baseline", "baseline"))
    for row in cmp.rows():
        assert row["delta"] == 0.0 and row["relative_reduction"] == 0.0


def test_comparison_csv_round_trip(tmp_path, split, tiny_config):
    cmp = compare_models(split, TrainConfig(epochs=1, batch_size=8), tiny_config)
    rows = cmp.rows()
    for r in rows:
        assert r["delta"] == pytest.approx(r["mae_b"] - r["mae_a"])
    write_comparison(tmp_path / "c.csv", rows)
    assert read_comparison(tmp_path / "c.csv") == rows


# --- checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, split, tiny_config):
    w = init_weights(tiny_config, 7, "hybrid")
    ck = Checkpoint("hybrid", tiny_config, w, split.norm, {"note": "x"})
    save_checkpoint(tmp_path / "a.npz", ck)
    back = load_checkpoint(tmp_path / "a.npz")
    assert back.kind == "hybrid" and back.config == tiny_config and back.meta == {"note": "x"}
    assert all(np.array_equal(back.weights[k], w[k]) for k in w)
    assert np.array_equal(back.norm.label_std, split.norm.label_std)


def test_checkpoint_bytes_are_deterministic(tmp_path, tiny_config):
    ck = Checkpoint("plain", tiny_config, init_weights(tiny_config, 1, "plain"))
    save_checkpoint(tmp_path / "a.npz", ck)
    save_checkpoint(tmp_path / "b.npz", ck)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_checkpoint_rejects_shape_mismatch(tmp_path, tiny_config):
    ck = Checkpoint("hybrid", tiny_config, init_weights(tiny_config, 1))
    save_checkpoint(tmp_path / "a.npz", ck)
    import json
    import zipfile
    with zipfile.ZipFile(tmp_path / "a.npz") as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    man = json.loads(entries["manifest.json"])
    man["config"]["latent_dim"] = 7
    entries["manifest.json"] = json.dumps(man).encode()
    with zipfile.ZipFile(tmp_path / "b.npz", "w") as zf:
        for n, data in entries.items():
            zf.writestr(n, data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "b.npz")


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.npz").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.npz")


def test_resume_reproduces_subsequent_epochs(tmp_path, split, tiny_config):
    tc = TrainConfig(epochs=5, batch_size=8, seed=2, early_stop_patience=50)
    full = Trainer("hybrid", split, tc, tiny_config)
    full.run()

    part = Trainer("hybrid", split, tc, tiny_config)
    part.run(epochs=2)
    save_checkpoint(tmp_path / "ck.npz", trainer_checkpoint(part))
    resumed = resume_trainer(load_checkpoint(tmp_path / "ck.npz"), split, tc)
    resumed.run()

    assert resumed.reports == full.reports
    assert all(np.array_equal(resumed.weights[k], full.weights[k]) for k in full.weights)
    assert all(np.array_equal(resumed.best_weights[k], full.best_weights[k]) for k in full.weights)


def test_resume_needs_trainer_state(tmp_path, split, tiny_config):
    ck = Checkpoint("hybrid", tiny_config, init_weights(tiny_config, 1), split.norm)
    with pytest.raises(ValueError):
        resume_trainer(ck, split, TrainConfig())


def test_comparison_dataclass_rows():
    from wkbp.metrics import metrics_from_predictions
    true = np.column_stack([np.linspace(100, 140, 10), np.linspace(60, 90, 10)])
    cmp = Comparison("a", "b")
    cmp.reports["a"] = metrics_from_predictions(true + 1, true)
    cmp.reports["b"] = metrics_from_predictions(true + 2, true)
    rows = cmp.rows()
    assert rows[0]["delta"] == pytest.approx(1.0) and rows[0]["relative_reduction"] == pytest.approx(0.5)
