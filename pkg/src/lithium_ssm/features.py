"""Battery features and regression targets.

Per charge cycle: an 8-vector [omega, b, T, r, tau, dqdv_max, dqdv_min,
dqdv_var] for RUL/SOH. Per discharge sample: [I, V, T] for SOC. Targets are
SOH = Q_k / Q_N, RUL counted in cycles to the first SOH below threshold, and
SOC by trapezoidal coulomb counting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    DegenerateCurveError,
    DomainError,
    InsufficientDataError,
    RankDeficiencyError,
)

CYCLE_FEATURE_NAMES = ("omega", "b", "temp_c", "resistance_ohm", "charge_time_h",
                       "dqdv_max", "dqdv_min", "dqdv_var")
STEP_FEATURE_NAMES = ("current_a", "voltage_v", "temp_c")

VOLTAGE_MERGE_TOL = 1e-6


@dataclass(frozen=True)
class ChargeCycleRecord:
    cycle_index: int
    time_h: np.ndarray
    capacity_ah: np.ndarray
    voltage_v: np.ndarray
    avg_temp_c: float
    internal_resistance_ohm: float
    cycle_capacity_ah: float

    def __post_init__(self):
        for name in ("time_h", "capacity_ah", "voltage_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.time_h)
        if len(self.capacity_ah) != n or len(self.voltage_v) != n:
            raise DataError("time, capacity and voltage lengths differ", f"cycle {self.cycle_index}")
        if self.cycle_index < 1:
            raise DataError("cycle_index must be >= 1", f"cycle {self.cycle_index}")
        if n > 1 and np.any(np.diff(self.time_h) <= 0):
            i = int(np.argmax(np.diff(self.time_h) <= 0)) + 1
            raise DataError(f"time not strictly increasing at sample {i}", f"cycle {self.cycle_index}")
        if np.any(self.capacity_ah < 0):
            raise DataError("negative capacity", f"cycle {self.cycle_index}")
        if n > 1 and np.any(np.diff(self.capacity_ah) < 0):
            i = int(np.argmax(np.diff(self.capacity_ah) < 0)) + 1
            raise DataError(f"capacity decreases at sample {i}", f"cycle {self.cycle_index}")


@dataclass(frozen=True)
class CycleFeatures:
    omega: float
    b: float
    temp_c: float
    resistance_ohm: float
    charge_time_h: float
    dqdv_max: float
    dqdv_min: float
    dqdv_var: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in CYCLE_FEATURE_NAMES])


@dataclass(frozen=True)
class DischargeRecord:
    time_h: np.ndarray
    current_a: np.ndarray
    voltage_v: np.ndarray
    temp_c: np.ndarray
    nominal_capacity_ah: float
    soc_initial: float = 1.0

    def __post_init__(self):
        for name in ("time_h", "current_a", "voltage_v", "temp_c"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.time_h)
        if any(len(getattr(self, f)) != n for f in ("current_a", "voltage_v", "temp_c")):
            raise DataError("discharge columns have different lengths")
        if n > 1 and np.any(np.diff(self.time_h) <= 0):
            i = int(np.argmax(np.diff(self.time_h) <= 0)) + 1
            raise DataError("time not strictly increasing", f"sample {i}")
        if not self.nominal_capacity_ah > 0:
            raise DomainError(f"nominal capacity must be > 0, got {self.nominal_capacity_ah}")
        if not 0.0 <= self.soc_initial <= 1.0:
            raise DomainError(f"initial SOC must lie in [0, 1], got {self.soc_initial}")

    def __len__(self):
        return len(self.time_h)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


# ---------------------------------------------------------------------------
# IC curve

def fit_ic_recurrence(capacity_ah) -> tuple[float, float]:
    """Least-squares fit of Q[i+1] - Q[i] = -omega * Q[i]**2 + b.

    Returns ``(omega, b)``.
    """
    q = np.asarray(capacity_ah, dtype=np.float64)
    if q.size < 3:
        raise InsufficientDataError(f"need at least 3 capacity samples, got {q.size}")
    dq = np.diff(q)
    q2 = q[:-1] ** 2
    # centred normal equations: better conditioned than the raw 2x2 system
    q2_mean = q2.mean()
    dq_mean = dq.mean()
    q2c = q2 - q2_mean
    sxx = float(np.dot(q2c, q2c))
    scale = float(np.dot(q2, q2))
    if sxx <= 1e-24 * max(scale, 1e-300) or sxx == 0.0:
        raise RankDeficiencyError("regressor Q^2 is constant; omega is not identifiable")
    slope = float(np.dot(q2c, dq - dq_mean)) / sxx
    omega = -slope
    b = dq_mean - slope * q2_mean
    return omega, b


def ic_residual(capacity_ah, omega: float, b: float) -> np.ndarray:
    q = np.asarray(capacity_ah, dtype=np.float64)
    return np.diff(q) - (-omega * q[:-1] ** 2 + b)


def _merge_voltages(voltage, capacity):
    order = np.argsort(voltage, kind="stable")
    v = voltage[order]
    q = capacity[order]
    # a new group starts wherever the gap to the previous sample reaches the tolerance
    starts = np.concatenate([[True], np.diff(v) >= VOLTAGE_MERGE_TOL])
    group = np.cumsum(starts) - 1
    counts = np.bincount(group)
    return np.bincount(group, weights=v) / counts, np.bincount(group, weights=q) / counts


def moving_average(values, window: int) -> np.ndarray:
    """Centred moving average; the window shrinks at the ends."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be a positive odd integer, got {window}")
    values = np.asarray(values, dtype=np.float64)
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(values.size)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, values.size)
    return (csum[hi] - csum[lo]) / (hi - lo)


def dqdv_curve(voltage_v, capacity_ah, smoothing_window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed dQ/dV on the de-duplicated voltage grid; returns ``(v, dqdv)``."""
    v, q = _merge_voltages(np.asarray(voltage_v, dtype=np.float64),
                           np.asarray(capacity_ah, dtype=np.float64))
    if v.size < 2:
        raise DegenerateCurveError("all voltages coincide; dQ/dV is undefined")
    slope = np.gradient(q, v)
    return v, moving_average(slope, smoothing_window)


def dqdv_stats(voltage_v, capacity_ah, smoothing_window: int = 5) -> tuple[float, float, float]:
    """(max, min, population variance) of the smoothed incremental capacity."""
    _, d = dqdv_curve(voltage_v, capacity_ah, smoothing_window)
    return float(d.max()), float(d.min()), float(d.var())


def build_cycle_features(rec: ChargeCycleRecord, smoothing_window: int = 5) -> CycleFeatures:
    try:
        omega, b = fit_ic_recurrence(rec.capacity_ah)
        dmax, dmin, dvar = dqdv_stats(rec.voltage_v, rec.capacity_ah, smoothing_window)
    except DataError as exc:
        if exc.locus is None:
            exc.locus = f"cycle {rec.cycle_index}"
            exc.args = (f"{exc.args[0]} (cycle {rec.cycle_index})",)
        raise
    return CycleFeatures(
        omega=omega,
        b=b,
        temp_c=float(rec.avg_temp_c),
        resistance_ohm=float(rec.internal_resistance_ohm),
        charge_time_h=float(rec.time_h[-1] - rec.time_h[0]),
        dqdv_max=dmax,
        dqdv_min=dmin,
        dqdv_var=dvar,
    )


# ---------------------------------------------------------------------------
# targets

def soh(q_k, q_n):
    """State of health, Q_k / Q_N. Works elementwise on arrays."""
    q_n = np.asarray(q_n, dtype=np.float64)
    if np.any(q_n <= 0):
        raise DomainError(f"nominal capacity must be > 0, got {q_n}")
    if np.any(np.asarray(q_k) < 0):
        raise DomainError("capacity must be >= 0")
    out = np.asarray(q_k, dtype=np.float64) / q_n
    return float(out) if out.ndim == 0 else out


def end_of_life_index(soh_series, threshold: float = 0.8) -> int | None:
    s = np.asarray(soh_series, dtype=np.float64)
    if s.size == 0:
        raise InsufficientDataError("SOH series is empty")
    below = np.flatnonzero(s < threshold)
    return int(below[0]) if below.size else None


def rul_labels(soh_series, threshold: float = 0.8) -> np.ndarray | None:
    """Remaining cycles until the first SOH below ``threshold``, then 0.

    Returns ``None`` when the threshold is never crossed.
    """
    k_eol = end_of_life_index(soh_series, threshold)
    if k_eol is None:
        return None
    k = np.arange(len(soh_series))
    return np.maximum(k_eol - k, 0)


def coulomb_count(rec: DischargeRecord, clamp: bool = False) -> np.ndarray:
    """SOC at every sample by trapezoidal integration of current (A, hours)."""
    t = rec.time_h
    i = rec.current_a
    charge = np.zeros(len(t))
    if len(t) > 1:
        charge[1:] = np.cumsum(0.5 * (i[1:] + i[:-1]) * np.diff(t))
    soc_series = rec.soc_initial - charge / rec.nominal_capacity_ah
    return np.clip(soc_series, 0.0, 1.0) if clamp else soc_series


def step_features(rec: DischargeRecord) -> np.ndarray:
    if len(rec) == 0:
        raise InsufficientDataError("discharge record has no samples")
    return np.column_stack([rec.current_a, rec.voltage_v, rec.temp_c])
