"""Command-line front end.

Subcommands: synth, ingest, segment, train, eval, report. Every option is a
key of one flat configuration; values come from the command line, then the
``--config`` JSON file, then built-in defaults. The effective configuration
is written to ``<out>/run_config.resolved``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, EmptyInputError, WkbpError
from .metrics import (OUTPUTS, MetricsReport, metrics_from_predictions, pearson_r, read_csv, write_csv,
                      write_metrics_report)
from .model import KINDS, ModelConfig
from .signals import (DatasetSplit, detect_r_peaks, fit_norm_stats, load_records, read_beats, segment_beats,
                      split_dataset, write_beats)
from .train import (Comparison, TrainConfig, Trainer, evaluate, predict_mmHg, resume_trainer, trainer_checkpoint,
                    write_comparison, write_epoch_log)
from .windkessel import InflowProfile, synth_dataset, write_synthetic

log = logging.getLogger("wkbp")

_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "seed"]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "seed"]

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "out": ".",
    "sample_rate_hz": 125.0,
    # synth
    "subjects": 20,
    "beats": 50,
    "noise_std": 0.0,
    "r_p_range": [0.02, 0.1],
    "r_d_range": [0.9, 1.5],
    "c_range": [0.8, 2.2],
    "q0": 400.0,
    "systole_fraction": 0.35,
    "period_s": 0.85,
    # inputs
    "records": None,
    "beats_file": None,
    "checkpoint": None,
    "checkpoints": None,
    "predictions": None,
    "resume": None,
    # split / model / training
    "split_fractions": [0.8, 0.1, 0.1],
    "split_by": "beat",
    "kind": "hybrid",
    **{k: f.default for k in _MODEL_KEYS for f in fields(ModelConfig) if f.name == k},
    **{k: f.default for k in _TRAIN_KEYS for f in fields(TrainConfig) if f.name == k},
    "eval_split": "test",
    "pearson_grouping": "pooled",
    "hist_bin_mmHg": 1.0,
}

CHOICES = {
    "split_by": ("beat", "record"),
    "kind": KINDS,
    "eval_split": ("train", "val", "test", "all"),
    "pearson_grouping": ("pooled", "record"),
}

HELP = {
    "records": "directory of record CSVs (header ppg,abp,ecg)",
    "beats_file": "beat dataset CSV (152 columns)",
    "checkpoint": "model checkpoint (.npz)",
    "checkpoints": "two checkpoints to compare in `report`",
    "predictions": "CSV with true_sbp,true_dbp,pred_sbp,pred_dbp to score directly",
    "resume": "checkpoint to resume training from",
    "subjects": "number of synthetic subjects",
    "beats": "labelled beats per synthetic subject",
}

PREDICTIONS_HEADER = ["true_sbp", "true_dbp", "pred_sbp", "pred_dbp"]
SCATTER_HEADER = ["model", "output", "true", "pred"]
HIST_HEADER = ["model", "output", "bin_lo", "bin_hi", "count"]


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON config file")
    common.add_argument("-v", "--verbose", action="count", default=0)
    for key, default in DEFAULTS.items():
        kw: Dict[str, Any] = {"dest": key, "default": None, "help": HELP.get(key)}
        if key in CHOICES:
            kw["choices"] = CHOICES[key]
        elif isinstance(default, list) or key == "checkpoints":
            kw["nargs"] = "+"
            kw["type"] = str if key == "checkpoints" else float
        elif isinstance(default, bool):
            kw["type"] = lambda s: s.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            kw["type"] = int
        elif isinstance(default, float):
            kw["type"] = float
        common.add_argument(_flag(key), **kw)

    parser = argparse.ArgumentParser(prog="wkbp", description="Hybrid Windkessel / neural-ODE BP estimation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("synth", "generate synthetic Windkessel records"),
        ("ingest", "validate record CSVs and write a manifest"),
        ("segment", "detect R-peaks and write the beat dataset"),
        ("train", "train a model and write checkpoint + epoch log"),
        ("eval", "score a checkpoint (or a predictions CSV)"),
        ("report", "hybrid-vs-baseline comparison and plot data"),
    ):
        sub.add_parser(name, parents=[common], help=helptext)
    return parser


def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    cfg = dict(DEFAULTS)
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a flat JSON object")
        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(data)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    validate_config(cfg)
    return cfg


def validate_config(cfg: Dict[str, Any]):
    """Check every value against downstream invariants before any work."""
    try:
        model_config(cfg)
        train_config(cfg)
        InflowProfile(cfg["q0"], cfg["systole_fraction"], cfg["period_s"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for key, choices in CHOICES.items():
        if cfg[key] not in choices:
            raise ConfigError(f"{key} must be one of {choices}, got {cfg[key]!r}")
    if int(cfg["subjects"]) < 1:
        raise ConfigError("subjects must be >= 1")
    if int(cfg["beats"]) < 1:
        raise ConfigError("beats must be >= 1")
    if float(cfg["noise_std"]) < 0:
        raise ConfigError("noise_std must be >= 0")
    if not float(cfg["sample_rate_hz"]) > 0:
        raise ConfigError("sample_rate_hz must be positive")
    for key in ("r_p_range", "r_d_range", "c_range"):
        r = cfg[key]
        if len(r) != 2 or not 0 < r[0] <= r[1]:
            raise ConfigError(f"{key} must be [lo, hi] with 0 < lo <= hi")
    fr = cfg["split_fractions"]
    if len(fr) != 3 or any(not f > 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
        raise ConfigError("split_fractions must be three positive numbers summing to 1")
    if not float(cfg["hist_bin_mmHg"]) > 0:
        raise ConfigError("hist_bin_mmHg must be positive")


def model_config(cfg) -> ModelConfig:
    return ModelConfig(**{k: int(cfg[k]) for k in _MODEL_KEYS}, seed=int(cfg["seed"]))


def train_config(cfg) -> TrainConfig:
    kw = {k: type(getattr(TrainConfig, k))(cfg[k]) for k in _TRAIN_KEYS}
    return TrainConfig(**kw, seed=int(cfg["seed"]))


def _require(cfg, key):
    if cfg.get(key) is None:
        raise ConfigError(f"{_flag(key)} is required for this command")
    return cfg[key]


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cfg: Dict[str, Any], command: str):
    data = {"command": command, **cfg}
    (out / "run_config.resolved").write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg) -> int:
    out = _out_dir(cfg)
    data = synth_dataset(
        int(cfg["subjects"]), int(cfg["beats"]),
        {"r_p": tuple(cfg["r_p_range"]), "r_d": tuple(cfg["r_d_range"]), "c": tuple(cfg["c_range"])},
        float(cfg["noise_std"]), int(cfg["seed"]), float(cfg["sample_rate_hz"]),
        InflowProfile(cfg["q0"], cfg["systole_fraction"], cfg["period_s"]),
    )
    write_synthetic(out, data)
    rows = [{"subject": r.id, "beat": k, "sbp": lab[0], "dbp": lab[1]}
            for r, labs in zip(data.records, data.labels) for k, lab in enumerate(labs)]
    write_csv(out / "true_labels.csv", ["subject", "beat", "sbp", "dbp"], rows)
    log.info("wrote %d records to %s", len(data.records), out / "records")
    return 0


def _load(cfg):
    records = load_records(_require(cfg, "records"), float(cfg["sample_rate_hz"]))
    return records


def cmd_ingest(cfg) -> int:
    out = _out_dir(cfg)
    rows = []
    for rec in _load(cfg):
        try:
            n_peaks = len(detect_r_peaks(rec.ecg, rec.sample_rate_hz))
        except WkbpError:
            n_peaks = 0
        rows.append({"record": rec.id, "n_samples": len(rec), "duration_s": rec.duration_s,
                     "sample_rate_hz": rec.sample_rate_hz, "n_peaks": n_peaks})
    write_csv(out / "records_manifest.csv", ["record", "n_samples", "duration_s", "sample_rate_hz", "n_peaks"], rows)
    log.info("ingested %d records", len(rows))
    return 0


def cmd_segment(cfg) -> int:
    out = _out_dir(cfg)
    beats, summary = [], []
    for rec in _load(cfg):
        try:
            seg = segment_beats(rec, detect_r_peaks(rec.ecg, rec.sample_rate_hz))
        except WkbpError as exc:
            log.warning("%s: %s", rec.id, exc)
            summary.append({"record": rec.id, "n_beats": 0, "n_dropped": 0, "error": str(exc)})
            continue
        beats.extend(seg.beats)
        summary.append({"record": rec.id, "n_beats": len(seg.beats), "n_dropped": seg.n_dropped, "error": ""})
    if not beats:
        raise EmptyInputError("no beats survived segmentation")
    path = Path(cfg["beats_file"]) if cfg.get("beats_file") else out / "beats.csv"
    write_beats(path, beats)
    write_csv(out / "segment_summary.csv", ["record", "n_beats", "n_dropped", "error"], summary)
    log.info("wrote %d beats (%d dropped) to %s", len(beats), sum(s["n_dropped"] for s in summary), path)
    return 0


def _split(cfg, beats) -> DatasetSplit:
    groups = [m.source_record for m, _ in beats] if cfg["split_by"] == "record" else None
    return split_dataset(beats, tuple(cfg["split_fractions"]), int(cfg["seed"]), groups)


def _split_meta(cfg):
    return {"split_fractions": list(cfg["split_fractions"]), "split_by": cfg["split_by"],
            "split_seed": int(cfg["seed"]), "beats_file": str(cfg.get("beats_file"))}


def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    beats = read_beats(_require(cfg, "beats_file"))
    split = _split(cfg, beats)
    tc = train_config(cfg)
    if cfg.get("resume"):
        ckpt = load_checkpoint(cfg["resume"])
        trainer = resume_trainer(ckpt, split, tc)
    else:
        trainer = Trainer(cfg["kind"], split, tc, model_config(cfg))
    trainer.run()
    ckpt_path = Path(cfg["checkpoint"]) if cfg.get("checkpoint") else out / "checkpoint.npz"
    save_checkpoint(ckpt_path, trainer_checkpoint(trainer, _split_meta(cfg)))
    write_epoch_log(out / "epoch_log.csv", trainer.reports)
    X_train = [b for b in split.train]
    rep = evaluate(trainer.best_weights, trainer.kind, X_train, trainer.norm, trainer.mc)
    log.info("train MAE sbp %.3f dbp %.3f mmHg", rep.mae_sbp, rep.mae_dbp)
    return 0


def _eval_beats(cfg, ckpt: Checkpoint):
    beats = read_beats(_require(cfg, "beats_file"))
    if cfg["eval_split"] == "all":
        return beats
    meta = ckpt.meta
    fr = tuple(meta.get("split_fractions", cfg["split_fractions"]))
    seed = int(meta.get("split_seed", cfg["seed"]))
    by = meta.get("split_by", cfg["split_by"])
    groups = [m.source_record for m, _ in beats] if by == "record" else None
    return getattr(split_dataset(beats, fr, seed, groups), cfg["eval_split"])


def _report_for(cfg, pred, true, groups=None) -> MetricsReport:
    rep = metrics_from_predictions(pred, true)
    if cfg["pearson_grouping"] == "record" and groups is not None:
        for j, name in enumerate(OUTPUTS):
            rs = []
            for g in sorted(set(groups)):
                sel = np.array([x == g for x in groups])
                r = pearson_r(pred[sel, j], true[sel, j])
                if math.isfinite(r):
                    rs.append(r)
            getattr(rep, name).pearson = float(np.mean(rs)) if rs else float("nan")
    return rep


def _read_predictions(path):
    rows = read_csv(path, PREDICTIONS_HEADER)
    arr = np.array([[float(r[k]) for k in PREDICTIONS_HEADER] for r in rows]).reshape(-1, 4)
    return arr[:, 2:], arr[:, :2]


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    if cfg.get("predictions"):
        pred, true = _read_predictions(cfg["predictions"])
        reports = {"predictions": _report_for(cfg, pred, true)}
    else:
        ckpt = load_checkpoint(_require(cfg, "checkpoint"))
        beats = _eval_beats(cfg, ckpt)
        pred, true = predict_mmHg(ckpt.weights, ckpt.kind, beats, ckpt.norm, ckpt.config)
        reports = {ckpt.kind: _report_for(cfg, pred, true, [m.source_record for m, _ in beats])}
    write_metrics_report(out / "metrics.csv", reports)
    for name, rep in reports.items():
        log.info("%s: MAE sbp %.3f dbp %.3f, BHS %s/%s", name, rep.mae_sbp, rep.mae_dbp,
                 rep.sbp.bhs.grade, rep.dbp.bhs.grade)
    return 0


def histogram_rows(model: str, output: str, errors, bin_width: float) -> List[dict]:
    errors = np.asarray(errors, dtype=np.float64)
    lo = math.floor(errors.min() / bin_width) * bin_width
    hi = max(lo + bin_width, math.ceil(errors.max() / bin_width) * bin_width)
    edges = lo + bin_width * np.arange(int(round((hi - lo) / bin_width)) + 1)
    counts, edges = np.histogram(errors, bins=edges)
    return [{"model": model, "output": output, "bin_lo": float(a), "bin_hi": float(b), "count": int(c)}
            for a, b, c in zip(edges[:-1], edges[1:], counts)]


def cmd_report(cfg) -> int:
    out = _out_dir(cfg)
    beats = read_beats(_require(cfg, "beats_file"))
    ckpts = cfg.get("checkpoints")
    preds = {}
    if ckpts:
        if len(ckpts) != 2:
            raise ConfigError("--checkpoints takes exactly two paths")
        loaded = [load_checkpoint(p) for p in ckpts]
        names = [Path(p).stem for p in ckpts]
        if names[0] == names[1]:
            names = [f"{n}_{i}" for i, n in enumerate(names, 1)]
        cmp = Comparison(names[0], names[1])
        for name, ck in zip(names, loaded):
            test = _eval_beats(cfg, ck)
            pred, true = predict_mmHg(ck.weights, ck.kind, test, ck.norm, ck.config)
            preds[name] = (pred, true)
            cmp.reports[name] = metrics_from_predictions(pred, true)
    else:
        split = _split(cfg, beats)
        tc, mc = train_config(cfg), model_config(cfg)
        cmp = Comparison("hybrid", "baseline")
        for kind in ("hybrid", "baseline"):
            trainer = Trainer(kind, split, tc, mc)
            trainer.run()
            save_checkpoint(out / f"{kind}.npz", trainer_checkpoint(trainer, _split_meta(cfg)))
            write_epoch_log(out / f"epoch_log_{kind}.csv", trainer.reports)
            pred, true = predict_mmHg(trainer.best_weights, kind, split.test, split.norm, mc)
            preds[kind] = (pred, true)
            cmp.reports[kind] = metrics_from_predictions(pred, true)
    write_comparison(out / "comparison.csv", cmp.rows())
    write_metrics_report(out / "metrics.csv", cmp.reports)
    scatter, hist = [], []
    for name, (pred, true) in preds.items():
        for j, output in enumerate(OUTPUTS):
            scatter.extend({"model": name, "output": output, "true": t, "pred": p}
                           for t, p in zip(true[:, j], pred[:, j]))
            hist.extend(histogram_rows(name, output, pred[:, j] - true[:, j], float(cfg["hist_bin_mmHg"])))
    write_csv(out / "scatter.csv", SCATTER_HEADER, scatter)
    write_csv(out / "error_hist.csv", HIST_HEADER, hist)
    for row in cmp.rows():
        log.info("%s: MAE %s %.3f vs %s %.3f (reduction %.1f%%)", row["output"], row["model_a"], row["mae_a"],
                 row["model_b"], row["mae_b"], 100 * row["relative_reduction"])
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "segment": cmd_segment,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = _out_dir(cfg)
        _write_resolved(out, cfg, args.command)
        return COMMANDS[args.command](cfg)
    except (WkbpError, FileNotFoundError) as exc:
        print(f"wkbp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
