"""Accuracy metrics and clinical grading (BHS, AAMI) for SBP/DBP estimates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence

import numpy as np

from .errors import EmptyInputError, MalformedFileError, TooFewSamplesError

OUTPUTS = ("sbp", "dbp")

# cumulative % of |error| within 5 / 10 / 15 mmHg
BHS_THRESHOLDS = (
    ("A", (60.0, 85.0, 95.0)),
    ("B", (50.0, 75.0, 90.0)),
    ("C", (40.0, 65.0, 85.0)),
)
AAMI_MAX_MEAN = 5.0
AAMI_MAX_SD = 8.0

REPORT_HEADER = ["model", "output", "mae", "pearson", "pct5", "pct10", "pct15", "bhs_grade",
                 "aami_mean", "aami_sd", "aami_pass", "n"]


class BHSResult(NamedTuple):
    pct_5: float
    pct_10: float
    pct_15: float
    grade: str


class AAMIResult(NamedTuple):
    mean_error: float
    sd_error: float
    passed: bool


def grade_from_percentages(pct_5: float, pct_10: float, pct_15: float) -> str:
    for grade, (t5, t10, t15) in BHS_THRESHOLDS:
        if pct_5 >= t5 and pct_10 >= t10 and pct_15 >= t15:
            return grade
    return "D"


def bhs_grade(errors) -> BHSResult:
    e = np.abs(np.asarray(errors, dtype=np.float64).ravel())
    if e.size == 0:
        raise EmptyInputError("bhs_grade needs at least one error")
    pct = [100.0 * np.count_nonzero(e <= k) / e.size for k in (5, 10, 15)]
    return BHSResult(*pct, grade_from_percentages(*pct))


def aami_check(errors) -> AAMIResult:
    """Pass iff |mean error| <= 5 mmHg and sample SD <= 8 mmHg."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size < 2:
        raise TooFewSamplesError("aami_check needs at least two errors")
    mean = float(np.mean(e))
    sd = float(np.std(e, ddof=1))
    return AAMIResult(mean, sd, abs(mean) <= AAMI_MAX_MEAN and sd <= AAMI_MAX_SD)


def mean_absolute_error(pred, true) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(true, dtype=np.float64))))


def pearson_r(pred, true) -> float:
    """Sample Pearson correlation; NaN when either input has zero variance."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(true, dtype=np.float64).ravel()
    if x.size < 2:
        return float("nan")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return float("nan")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass
class OutputMetrics:
    mae: float
    pearson: float
    bhs: BHSResult
    aami: AAMIResult


@dataclass
class MetricsReport:
    sbp: OutputMetrics
    dbp: OutputMetrics
    n_beats: int

    @property
    def mae_sbp(self):
        return self.sbp.mae

    @property
    def mae_dbp(self):
        return self.dbp.mae

    @property
    def pearson_sbp(self):
        return self.sbp.pearson

    @property
    def pearson_dbp(self):
        return self.dbp.pearson

    def rows(self, model: str) -> List[dict]:
        out = []
        for name in OUTPUTS:
            m: OutputMetrics = getattr(self, name)
            out.append({
                "model": model, "output": name, "mae": m.mae, "pearson": m.pearson,
                "pct5": m.bhs.pct_5, "pct10": m.bhs.pct_10, "pct15": m.bhs.pct_15,
                "bhs_grade": m.bhs.grade, "aami_mean": m.aami.mean_error, "aami_sd": m.aami.sd_error,
                "aami_pass": m.aami.passed, "n": self.n_beats,
            })
        return out


def metrics_from_predictions(pred_mmHg, true_mmHg) -> MetricsReport:
    """Per-output metrics from (n, 2) SBP/DBP arrays in mmHg."""
    pred = np.asarray(pred_mmHg, dtype=np.float64).reshape(-1, 2)
    true = np.asarray(true_mmHg, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0:
        raise EmptyInputError("no beats to evaluate")
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {true.shape}")
    per = {}
    for j, name in enumerate(OUTPUTS):
        err = pred[:, j] - true[:, j]
        aami = aami_check(err) if len(err) >= 2 else AAMIResult(float(err[0]), float("nan"), False)
        per[name] = OutputMetrics(mean_absolute_error(pred[:, j], true[:, j]), pearson_r(pred[:, j], true[:, j]),
                                  bhs_grade(err), aami)
    return MetricsReport(per["sbp"], per["dbp"], len(pred))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Sequence[dict]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])


def read_csv(path, header: Sequence[str]) -> List[Dict[str, str]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != list(header):
            raise MalformedFileError(f"{path}: expected header {list(header)}, got {got}")
        return [dict(zip(header, row)) for row in reader]


def write_metrics_report(path, reports: Dict[str, MetricsReport]):
    rows = [r for model, rep in reports.items() for r in rep.rows(model)]
    write_csv(path, REPORT_HEADER, rows)


def read_metrics_report(path) -> Dict[str, MetricsReport]:
    """Parse a metrics CSV back into reports keyed by model name."""
    by_model: Dict[str, Dict[str, OutputMetrics]] = {}
    counts: Dict[str, int] = {}
    for row in read_csv(path, REPORT_HEADER):
        m = OutputMetrics(
            float(row["mae"]), float(row["pearson"]),
            BHSResult(float(row["pct5"]), float(row["pct10"]), float(row["pct15"]), row["bhs_grade"]),
            AAMIResult(float(row["aami_mean"]), float(row["aami_sd"]), row["aami_pass"] == "true"),
        )
        by_model.setdefault(row["model"], {})[row["output"]] = m
        counts[row["model"]] = int(row["n"])
    return {k: MetricsReport(v["sbp"], v["dbp"], counts[k]) for k, v in by_model.items()}
