"""Record ingestion, R-peak detection, beat segmentation and normalization.

A record is three synchronized channels (PPG, ABP, ECG). Beats are the
intervals between consecutive ECG R-peaks; each beat's PPG and ECG windows are
resampled to 75 points and labelled with the ABP maximum (SBP) and minimum
(DBP) over the same window.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter1d, uniform_filter1d
from scipy.signal import find_peaks

from .errors import (
    DegenerateChannelError,
    EmptyInputError,
    EmptyRecordError,
    MalformedFileError,
    NoBeatsError,
    TooFewBeatsError,
    WindowTooShortError,
)

log = logging.getLogger(__name__)

SEQ_LEN = 75
RECORD_HEADER = ["ppg", "abp", "ecg"]
BEAT_HEADER = (["sbp", "dbp"] + [f"ppg_{i}" for i in range(SEQ_LEN)]
               + [f"ecg_{i}" for i in range(SEQ_LEN)])
INDEX_HEADER = ["record", "onset_index", "duration_s"]

# quality gate
MIN_BEAT_S = 0.25
MAX_BEAT_S = 2.0
MIN_DBP = 50.0
MAX_SBP = 220.0

# R-peak detector settings
SMOOTH_S = 0.12
THRESH_WINDOW_S = 2.0
THRESH_FRAC = 0.5
REFRACTORY_S = 0.25


@dataclass
class RawRecord:
    id: str
    ppg: np.ndarray
    abp: np.ndarray
    ecg: np.ndarray
    sample_rate_hz: float = 125.0

    def __post_init__(self):
        self.ppg = np.asarray(self.ppg, dtype=np.float64)
        self.abp = np.asarray(self.abp, dtype=np.float64)
        self.ecg = np.asarray(self.ecg, dtype=np.float64)
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not (len(self.ppg) == len(self.abp) == len(self.ecg)):
            raise MalformedFileError(
                f"{self.id}: channel lengths differ ({len(self.ppg)}, {len(self.abp)}, {len(self.ecg)})")

    def __len__(self):
        return len(self.ppg)

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass
class BeatMatrix:
    values: np.ndarray  # (75, 2): column 0 PPG, column 1 ECG
    source_record: str = ""
    onset_index: int = -1
    duration_s: float = float("nan")

    @property
    def ppg(self):
        return self.values[:, 0]

    @property
    def ecg(self):
        return self.values[:, 1]


@dataclass(frozen=True)
class BeatLabel:
    sbp_mmHg: float
    dbp_mmHg: float

    def as_array(self):
        return np.array([self.sbp_mmHg, self.dbp_mmHg])


Beat = Tuple[BeatMatrix, BeatLabel]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    label_mean: np.ndarray
    label_std: np.ndarray

    def to_dict(self):
        return {k: [float(x) for x in getattr(self, k)] for k in ("mean", "std", "label_mean", "label_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in ("mean", "std", "label_mean", "label_std")})


@dataclass
class DatasetSplit:
    train: List[Beat]
    val: List[Beat]
    test: List[Beat]
    norm: NormStats


class Segmentation(NamedTuple):
    beats: List[Beat]
    n_dropped: int


# ---------------------------------------------------------------------------
# record files
# ---------------------------------------------------------------------------

def _parse_float(cell: str, where: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise MalformedFileError(f"{where}: non-numeric cell {cell!r}") from None


def read_record(path, sample_rate_hz: float = 125.0) -> RawRecord:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != RECORD_HEADER:
            raise MalformedFileError(f"{path}: expected header {','.join(RECORD_HEADER)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise MalformedFileError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            rows.append([_parse_float(c, f"{path}:{lineno}") for c in row])
    if len(rows) < 2 * sample_rate_hz:
        raise EmptyRecordError(f"{path}: {len(rows)} samples is less than 2 s at {sample_rate_hz} Hz")
    data = np.array(rows, dtype=np.float64)
    return RawRecord(path.stem, data[:, 0], data[:, 1], data[:, 2], sample_rate_hz)


def load_records(path, sample_rate_hz: float = 125.0) -> List[RawRecord]:
    """Load one record CSV, or every ``*.csv`` in a directory (sorted by name)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise EmptyInputError(f"no record CSVs in {path}")
    return [read_record(f, sample_rate_hz) for f in files]


def write_record(path, record: RawRecord):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for row in zip(record.ppg, record.abp, record.ecg):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# R-peaks and segmentation
# ---------------------------------------------------------------------------

def detection_function(ecg, sample_rate_hz: float) -> np.ndarray:
    """Squared first difference smoothed by a 0.12 s moving average."""
    ecg = np.asarray(ecg, dtype=np.float64)
    d = np.diff(ecg, prepend=ecg[0])
    width = max(1, int(round(SMOOTH_S * sample_rate_hz)))
    return uniform_filter1d(d * d, size=width, mode="constant")


def detect_r_peaks(ecg, sample_rate_hz: float = 125.0) -> List[int]:
    """Locate R-peaks in an ECG trace.

    Candidates are peaks of :func:`detection_function` above half of its
    rolling 2 s maximum, at least 0.25 s apart (larger peaks win). Each
    candidate is then snapped to the ECG maximum within +-0.06 s, which puts
    the index on the R wave itself rather than on the energy envelope.
    """
    ecg = np.asarray(ecg, dtype=np.float64)
    if sample_rate_hz <= 0:
        raise ValueError("sample_rate_hz must be positive")
    if len(ecg) < sample_rate_hz:
        raise ValueError(f"ECG too short: {len(ecg)} samples < 1 s")
    energy = detection_function(ecg, sample_rate_hz)
    roll = maximum_filter1d(energy, size=max(1, int(round(THRESH_WINDOW_S * sample_rate_hz))), mode="nearest")
    thresh = np.maximum(THRESH_FRAC * roll, np.finfo(float).tiny)
    refractory = int(math.ceil(REFRACTORY_S * sample_rate_hz))
    # zero padding lets peaks touching either end be found
    padded = np.concatenate([[0.0], energy, [0.0]])
    cand, _ = find_peaks(padded, height=np.concatenate([[np.inf], thresh, [np.inf]]), distance=refractory)
    cand = cand - 1

    half = max(1, int(round(0.5 * SMOOTH_S * sample_rate_hz)))
    peaks: List[int] = []
    for c in cand:
        lo, hi = max(0, c - half), min(len(ecg), c + half + 1)
        p = lo + int(np.argmax(ecg[lo:hi]))
        if peaks and p - peaks[-1] < REFRACTORY_S * sample_rate_hz:
            if ecg[p] > ecg[peaks[-1]]:
                peaks[-1] = p
            continue
        peaks.append(p)
    if len(peaks) < 2:
        raise NoBeatsError(f"found {len(peaks)} R-peak(s); need at least 2")
    return peaks


def resample_75(window) -> np.ndarray:
    """Linearly interpolate a window onto 75 equally spaced points."""
    window = np.asarray(window, dtype=np.float64)
    n = len(window)
    if n < 2:
        raise WindowTooShortError(f"window of length {n}; need at least 2 samples")
    return np.interp(np.linspace(0.0, n - 1.0, SEQ_LEN), np.arange(n, dtype=np.float64), window)


def passes_quality_gate(values: np.ndarray, label: BeatLabel, duration_s: float) -> bool:
    if not (MIN_BEAT_S < duration_s < MAX_BEAT_S):
        return False
    if values.shape != (SEQ_LEN, 2) or not np.all(np.isfinite(values)):
        return False
    sbp, dbp = label.sbp_mmHg, label.dbp_mmHg
    if not (np.isfinite(sbp) and np.isfinite(dbp)):
        return False
    return sbp > dbp and dbp >= MIN_DBP and sbp <= MAX_SBP


def segment_beats(record: RawRecord, peaks: Sequence[int]) -> Segmentation:
    """Cut ``record`` into beats ``[p_k, p_{k+1})`` and label them from ABP.

    Beats failing the quality gate are dropped and counted.
    """
    peaks = [int(p) for p in peaks]
    if len(peaks) < 2:
        raise NoBeatsError("need at least 2 peaks to form a beat")
    if any(b <= a for a, b in zip(peaks, peaks[1:])):
        raise ValueError("peaks must be strictly increasing")
    if peaks[0] < 0 or peaks[-1] > len(record):
        raise ValueError("peaks fall outside the record")
    fs = record.sample_rate_hz
    beats: List[Beat] = []
    dropped = 0
    for a, b in zip(peaks, peaks[1:]):
        abp = record.abp[a:b]
        label = BeatLabel(float(np.max(abp)), float(np.min(abp)))
        values = np.column_stack([resample_75(record.ppg[a:b]), resample_75(record.ecg[a:b])])
        duration = (b - a) / fs
        if not passes_quality_gate(values, label, duration):
            dropped += 1
            continue
        beats.append((BeatMatrix(values, record.id, a, duration), label))
    if not beats:
        raise NoBeatsError(f"{record.id}: all {dropped} candidate beats failed the quality gate")
    if dropped:
        log.info("%s: dropped %d of %d beats at the quality gate", record.id, dropped, dropped + len(beats))
    return Segmentation(beats, dropped)


def segment_record(record: RawRecord) -> Segmentation:
    return segment_beats(record, detect_r_peaks(record.ecg, record.sample_rate_hz))


# ---------------------------------------------------------------------------
# beat dataset files
# ---------------------------------------------------------------------------

def index_path(beats_path) -> Path:
    p = Path(beats_path)
    return p.with_name(p.stem + "_index.csv")


def write_beats(path, beats: Sequence[Beat]):
    """Write the 152-column beat table plus an ``*_index.csv`` sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BEAT_HEADER)
        for m, lab in beats:
            row = [lab.sbp_mmHg, lab.dbp_mmHg, *m.values[:, 0], *m.values[:, 1]]
            w.writerow([repr(float(v)) for v in row])
    with index_path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_HEADER)
        for m, _ in beats:
            w.writerow([m.source_record, m.onset_index, repr(float(m.duration_s))])


def read_beats(path) -> List[Beat]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != BEAT_HEADER:
            raise MalformedFileError(f"{path}: not a beat dataset (bad header)")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(BEAT_HEADER):
                raise MalformedFileError(f"{path}:{lineno}: expected {len(BEAT_HEADER)} columns, got {len(row)}")
            rows.append([_parse_float(c, f"{path}:{lineno}") for c in row])
    meta: List[tuple] = [("", -1, float("nan"))] * len(rows)
    ipath = index_path(path)
    if ipath.exists():
        with ipath.open(newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            meta = [(r[0], int(r[1]), float(r[2])) for r in reader]
        if len(meta) != len(rows):
            raise MalformedFileError(f"{ipath}: {len(meta)} rows but {len(rows)} beats")
    out = []
    for row, (rec, onset, dur) in zip(rows, meta):
        values = np.column_stack([row[2:2 + SEQ_LEN], row[2 + SEQ_LEN:]])
        out.append((BeatMatrix(values, rec, onset, dur), BeatLabel(row[0], row[1])))
    return out


# ---------------------------------------------------------------------------
# arrays, normalization, splitting
# ---------------------------------------------------------------------------

def beats_to_arrays(beats: Sequence[Beat]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack beats into ``X`` of shape (n, 75, 2) and labels ``Y`` (n, 2)."""
    if not beats:
        return np.zeros((0, SEQ_LEN, 2)), np.zeros((0, 2))
    X = np.stack([m.values for m, _ in beats])
    Y = np.array([[lab.sbp_mmHg, lab.dbp_mmHg] for _, lab in beats], dtype=np.float64)
    return X, Y


def fit_norm_stats(train: Sequence[Beat]) -> NormStats:
    if not train:
        raise TooFewBeatsError("cannot fit normalization on an empty train set")
    X, Y = beats_to_arrays(train)
    flat = X.reshape(-1, 2)
    mean, std = flat.mean(axis=0), flat.std(axis=0)
    label_mean, label_std = Y.mean(axis=0), Y.std(axis=0)
    for name, s in (("ppg", std[0]), ("ecg", std[1]), ("sbp", label_std[0]), ("dbp", label_std[1])):
        if not s > 1e-8:
            raise DegenerateChannelError(f"{name} has (near) zero variance in the train split")
    return NormStats(mean, std, label_mean, label_std)


def apply_norm(beat: BeatMatrix, stats: NormStats) -> BeatMatrix:
    return BeatMatrix((beat.values - stats.mean) / stats.std, beat.source_record, beat.onset_index, beat.duration_s)


def normalize_inputs(X: np.ndarray, stats: NormStats) -> np.ndarray:
    return (X - stats.mean) / stats.std


def normalize_labels(Y, stats: NormStats) -> np.ndarray:
    return (np.asarray(Y, dtype=np.float64) - stats.label_mean) / stats.label_std


def denormalize_labels(Yn, stats: NormStats) -> np.ndarray:
    return np.asarray(Yn, dtype=np.float64) * stats.label_std + stats.label_mean


def invert_label_norm(pred, stats: NormStats) -> BeatLabel:
    sbp, dbp = denormalize_labels(pred, stats)
    return BeatLabel(float(sbp), float(dbp))


def split_sizes(n: int, fractions: Tuple[float, float, float]) -> Tuple[int, int, int]:
    """Floor the val/test shares (at least one each); the remainder trains."""
    n_val = max(1, int(math.floor(fractions[1] * n + 1e-9)))
    n_test = max(1, int(math.floor(fractions[2] * n + 1e-9)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise TooFewBeatsError(f"{n} items cannot fill train/val/test with fractions {fractions}")
    return n_train, n_val, n_test


def _check_fractions(fractions):
    if len(fractions) != 3 or any(not f > 0 for f in fractions):
        raise ValueError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")


def split_dataset(beats: Sequence[Beat], fractions=(0.8, 0.1, 0.1), seed: int = 0,
                  groups: Optional[Sequence[str]] = None) -> DatasetSplit:
    """Shuffle and partition beats, then fit normalization on train only.

    With ``groups`` (e.g. the source record of each beat) whole groups are
    assigned to one split, giving a subject-wise partition.
    """
    _check_fractions(fractions)
    beats = list(beats)
    if len(beats) < 3:
        raise TooFewBeatsError(f"need at least 3 beats, got {len(beats)}")
    rng = np.random.default_rng(seed)
    if groups is None:
        order = rng.permutation(len(beats))
        n_train, n_val, _ = split_sizes(len(beats), fractions)
        parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    else:
        if len(groups) != len(beats):
            raise ValueError("groups must align with beats")
        keys = sorted(set(groups))
        if len(keys) < 3:
            raise TooFewBeatsError(f"need at least 3 groups for a grouped split, got {len(keys)}")
        gorder = [keys[i] for i in rng.permutation(len(keys))]
        n_train, n_val, _ = split_sizes(len(keys), fractions)
        which = {g: 0 if i < n_train else 1 if i < n_train + n_val else 2 for i, g in enumerate(gorder)}
        parts = tuple(np.array([i for i, g in enumerate(groups) if which[g] == s], dtype=int) for s in range(3))
    train, val, test = ([beats[i] for i in idx] for idx in parts)
    return DatasetSplit(train, val, test, fit_norm_stats(train))
