"""Three-element Windkessel forward model and synthetic record generator.

Governing equation (pressure P, inflow Q)::

    (1 + r_p / r_d) Q + r_p c dQ/dt = P / r_d + c dP/dt

driven by a half-sine systolic ejection and zero diastolic flow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import rk4_step
from .errors import NonFiniteError
from .signals import RawRecord, write_record


@dataclass(frozen=True)
class Wk3Params:
    r_p: float  # characteristic impedance, mmHg*s/mL
    r_d: float  # peripheral resistance, mmHg*s/mL
    c: float  # arterial compliance, mL/mmHg

    def __post_init__(self):
        for k in ("r_p", "r_d", "c"):
            v = getattr(self, k)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{k} must be positive and finite, got {v}")

    def as_tuple(self):
        return (self.r_p, self.r_d, self.c)


@dataclass(frozen=True)
class InflowProfile:
    q0: float = 400.0  # peak flow, mL/s
    systole_fraction: float = 0.35
    period_s: float = 0.85

    def __post_init__(self):
        if self.q0 < 0:
            raise ValueError("q0 must be non-negative")
        if not 0 < self.systole_fraction < 1:
            raise ValueError("systole_fraction must lie in (0, 1)")
        if not 0.25 < self.period_s < 2.0:
            raise ValueError("period_s must lie in (0.25, 2.0)")

    @property
    def systole_s(self):
        return self.systole_fraction * self.period_s

    def flow(self, t: float) -> Tuple[float, float]:
        """Return Q(t) and dQ/dt."""
        tl = math.fmod(t, self.period_s)
        if tl < 0:
            tl += self.period_s
        ts = self.systole_s
        if tl >= ts:
            return 0.0, 0.0
        w = math.pi / ts
        return self.q0 * math.sin(w * tl), self.q0 * w * math.cos(w * tl)

    def mean_flow(self) -> float:
        return self.q0 * self.systole_fraction * 2.0 / math.pi


@dataclass
class PressureTrace:
    p: np.ndarray
    dt_s: float
    beat_onsets: List[int]
    true_sbp: np.ndarray  # beats 1..n-1; beat 0 is the discarded transient
    true_dbp: np.ndarray

    @property
    def t(self):
        return np.arange(len(self.p)) * self.dt_s


def wk3_rhs(p: float, t: float, params: Wk3Params, inflow: InflowProfile) -> float:
    q, dq = inflow.flow(t)
    r_p, r_d, c = params.r_p, params.r_d, params.c
    return ((1.0 + r_p / r_d) * q + r_p * c * dq - p / r_d) / c


def steady_mean_pressure(params: Wk3Params, inflow: InflowProfile) -> float:
    return inflow.mean_flow() * (params.r_p + params.r_d)


def periodic_start_pressure(params: Wk3Params, inflow: InflowProfile, dt_s: float) -> float:
    """Start pressure of the periodic steady state.

    The RK4 map over one cycle is affine in the start value, p -> a*p + b,
    so two probe integrations pin down the fixed point b / (1 - a).
    """
    n = int(round(inflow.period_s / dt_s))
    f = lambda t, y: wk3_rhs(y, t, params, inflow)  # noqa: E731

    def cycle(y):
        for i in range(n):
            y, _ = rk4_step(f, i * dt_s, y, dt_s)
        return y

    b = cycle(0.0)
    a = cycle(1.0) - b
    return b / (1.0 - a)


def simulate_pressure(params: Wk3Params, inflow: InflowProfile, n_beats: int,
                      dt_s: float, p0: Optional[float] = None) -> PressureTrace:
    """RK4-integrate the WK3 pressure over ``n_beats`` cardiac cycles.

    The trace runs from t = 0 through the onset of beat ``n_beats`` inclusive,
    so every beat has a closing boundary. Beat ``k`` spans samples
    ``[onset_k, onset_{k+1})``. ``p0`` defaults to the periodic steady-state
    start value, which makes the startup transient negligible.
    """
    if n_beats < 1:
        raise ValueError("n_beats must be >= 1")
    if not 0 < dt_s <= inflow.period_s / 50:
        raise ValueError(f"dt_s={dt_s} must be in (0, period/50]")
    if p0 is None:
        p0 = periodic_start_pressure(params, inflow, dt_s)
    n = int(round(n_beats * inflow.period_s / dt_s))
    p = np.empty(n + 1)
    p[0] = y = float(p0)
    f = lambda t, y: wk3_rhs(y, t, params, inflow)  # noqa: E731
    for i in range(n):
        y, _ = rk4_step(f, i * dt_s, y, dt_s)
        if not math.isfinite(y):
            raise NonFiniteError(f"pressure diverged at step {i}", where="simulate_pressure", step=i)
        p[i + 1] = y
    onsets = [int(round(k * inflow.period_s / dt_s)) for k in range(n_beats + 1)]
    sbp = np.array([p[a:b].max() for a, b in zip(onsets[1:-1], onsets[2:])])
    dbp = np.array([p[a:b].min() for a, b in zip(onsets[1:-1], onsets[2:])])
    return PressureTrace(p, dt_s, onsets, sbp, dbp)


DEFAULT_RANGES: Dict[str, Tuple[float, float]] = {
    "r_p": (0.02, 0.1),
    "r_d": (0.9, 1.5),
    "c": (0.8, 2.2),
}

PPG_DELAY_S = 0.05
ECG_PULSE_S = 0.008


@dataclass
class SyntheticDataset:
    records: List[RawRecord]
    params: List[Wk3Params]
    labels: List[np.ndarray]  # per record, (n_beats, 2) SBP/DBP ground truth
    r_peaks: List[List[int]]  # per record, beat boundaries in record samples
    inflow: InflowProfile = field(default_factory=InflowProfile)


def _simulate_subject(params: Wk3Params, inflow: InflowProfile, n_beats: int, sample_rate_hz: float):
    dt = 1.0 / sample_rate_hz
    # one leading transient beat and one trailing beat that only supplies
    # the closing R-peak plus some tail
    trace = simulate_pressure(params, inflow, n_beats + 2, dt)
    period_n = inflow.period_s * sample_rate_hz
    delay = int(round(PPG_DELAY_S * sample_rate_hz))
    lead = max(delay, int(round(0.3 * period_n)))
    tail = int(round(0.5 * period_n))
    start = trace.beat_onsets[1] - lead
    stop = trace.beat_onsets[n_beats + 1] + tail + 1
    p = trace.p[start:stop]
    delayed = trace.p[start - delay:stop - delay]
    peaks = [o - start for o in trace.beat_onsets[1:n_beats + 2]]
    labels = np.column_stack([trace.true_sbp[:n_beats], trace.true_dbp[:n_beats]])
    return p, delayed, peaks, labels


def synth_record(subject_id: str, params: Wk3Params, inflow: InflowProfile, n_beats: int,
                 sample_rate_hz: float, noise_std: float, rng: np.random.Generator,
                 ppg_range: Optional[Tuple[float, float]] = None):
    """Simulate one subject and build its PPG/ABP/ECG record.

    ``ppg_range`` is the (min, max) pressure mapped to PPG 0 and 1; by
    default the record's own delayed-pressure extremes. Returns the record,
    the (n_beats, 2) labels and the R-peak indices.
    """
    p, delayed, peaks, labels = _simulate_subject(params, inflow, n_beats, sample_rate_hz)
    return _build_record(subject_id, p, delayed, peaks, labels, sample_rate_hz, noise_std, rng, ppg_range)


def _build_record(subject_id, p, delayed, peaks, labels, sample_rate_hz, noise_std, rng, ppg_range):
    n = len(p)
    lo, hi = ppg_range if ppg_range is not None else (delayed.min(), delayed.max())
    ppg = (delayed - lo) / (hi - lo) if hi > lo else np.zeros(n)

    ecg = np.zeros(n)
    width = max(1, int(round(ECG_PULSE_S * sample_rate_hz)))
    for k in peaks:
        ecg[k:k + width] = 1.0

    abp = p.copy()
    if noise_std > 0:
        abp = abp + noise_std * rng.standard_normal(n)
        ppg = ppg + noise_std * rng.standard_normal(n)
        ecg = ecg + noise_std * rng.standard_normal(n)
        labels = np.array([[abp[a:b].max(), abp[a:b].min()] for a, b in zip(peaks, peaks[1:])])
    return RawRecord(subject_id, ppg, abp, ecg, sample_rate_hz), labels, peaks


def synth_dataset(n_subjects: int, beats_per_subject: int, param_ranges=None, noise_std: float = 0.0,
                  seed: int = 0, sample_rate_hz: float = 125.0,
                  inflow: Optional[InflowProfile] = None) -> SyntheticDataset:
    """Generate synthetic subjects with uniformly drawn WK3 parameters.

    ABP is the simulated pressure plus Gaussian noise (mmHg). PPG is the
    pressure delayed by 50 ms and min-max normalized with one (min, max)
    shared by all subjects, so PPG level still tracks pressure level across
    subjects. ECG is a train of 8 ms unit pulses at beat onsets.
    ``noise_std`` applies to every channel in its own units. Output depends
    only on the arguments.
    """
    if n_subjects < 1 or beats_per_subject < 1:
        raise ValueError("n_subjects and beats_per_subject must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    ranges = dict(DEFAULT_RANGES)
    ranges.update(param_ranges or {})
    for k, (lo, hi) in ranges.items():
        if k not in DEFAULT_RANGES:
            raise ValueError(f"unknown parameter range {k!r}")
        if not 0 < lo <= hi:
            raise ValueError(f"range for {k} must satisfy 0 < lo <= hi, got {(lo, hi)}")
    inflow = inflow or InflowProfile()
    rng = np.random.default_rng(seed)
    params = [Wk3Params(*(float(rng.uniform(*ranges[k])) for k in ("r_p", "r_d", "c")))
              for _ in range(n_subjects)]
    sims = [_simulate_subject(prm, inflow, beats_per_subject, sample_rate_hz) for prm in params]
    ppg_range = (min(s[1].min() for s in sims), max(s[1].max() for s in sims))
    out = SyntheticDataset([], [], [], [], inflow)
    for i, (prm, (p, delayed, peaks, labels)) in enumerate(zip(params, sims)):
        rec, labels, peaks = _build_record(f"subject_{i:03d}", p, delayed, peaks, labels,
                                           sample_rate_hz, noise_std, rng, ppg_range)
        out.records.append(rec)
        out.params.append(prm)
        out.labels.append(labels)
        out.r_peaks.append(peaks)
    return out


GROUND_TRUTH_HEADER = ["subject", "r_p", "r_d", "c"]


def write_synthetic(out_dir, data: SyntheticDataset):
    """Write ``records/<id>.csv`` per subject and ``ground_truth.csv``."""
    out_dir = Path(out_dir)
    rec_dir = out_dir / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    for rec in data.records:
        write_record(rec_dir / f"{rec.id}.csv", rec)
    with (out_dir / "ground_truth.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GROUND_TRUTH_HEADER)
        for rec, prm in zip(data.records, data.params):
            w.writerow([rec.id, repr(prm.r_p), repr(prm.r_d), repr(prm.c)])


def read_ground_truth(path) -> Dict[str, Wk3Params]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return {row["subject"]: Wk3Params(float(row["r_p"]), float(row["r_d"]), float(row["c"]))
                for row in reader}
