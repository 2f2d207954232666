"""Seeded synthetic battery data with exact ground truth.

Charge cycles follow the incremental-capacity recurrence

    Q[i+1] = Q[i] - omega_k * Q[i]**2 + b_k + eps,   Q[0] = 0

with per-cycle drift in (omega_k, b_k) and linear capacity fade. Discharges
follow piecewise-linear current schedules; their SOC truth comes from the
segment-wise closed-form integral of the schedule, not from the sampled
data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    TRUTH_CYCLE_COLUMNS,
    TRUTH_DISCHARGE_COLUMNS,
    DatasetManifest,
    ManifestFile,
    save_cycles,
    save_discharge,
    write_csv,
)
from .features import ChargeCycleRecord, DischargeRecord, NoiseSpec, rul_labels

# Current levels as multiples of Q_N (C-rate), one level per block of samples,
# with linear ramps of RAMP samples between levels. Positive = discharge.
PROFILES = {
    "DST": (0.5, 1.0, 0.5, -0.25, 0.0, 1.5, 0.5, -0.5, 1.0, 0.25),
    "FUDS": (0.3, 0.8, 1.2, 0.2, -0.4, 0.9, 0.6, 1.4, -0.2, 0.4, 0.7, 0.1),
    "US06": (1.2, 2.0, -0.6, 1.6, 0.4, 2.2, -0.9, 1.0),
}
BLOCK = 12
RAMP = 2


@dataclass(frozen=True)
class IcParams:
    omega0: float = 0.02
    b0: float = 0.012
    omega_drift: float = 1e-4
    b_drift: float = -2e-5


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_cycles: int = 150
    n_cells: int = 3
    q_n: float = 1.1
    fade_rate: float = 0.002
    ic: IcParams = field(default_factory=IcParams)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    n_charge_steps: int = 120
    charge_dt_h: float = 0.01
    r0_ohm: float = 0.05
    r_growth: float = 0.002
    temp_mean_c: float = 25.0
    temp_jitter_c: float = 0.5
    discharge_temps_c: tuple = (25.0,)
    discharge_dt_h: float = 1.0 / 3600.0
    soc_window_len: int | None = 100
    discharge_depth: float = 0.85
    voltage_noise_v: float = 0.001
    profiles: tuple = ("DST", "FUDS", "US06")

    def __post_init__(self):
        if self.fade_rate < 0:
            raise ValueError("fade_rate must be >= 0")
        if not self.q_n > 0:
            raise ValueError("q_n must be > 0")
        if self.n_cycles < 1 or self.n_cells < 1 or self.n_charge_steps < 3:
            raise ValueError("n_cycles, n_cells >= 1 and n_charge_steps >= 3 required")
        unknown = set(self.profiles) - set(PROFILES)
        if unknown:
            raise ValueError(f"unknown discharge profiles {sorted(unknown)}")


def cell_name(i: int) -> str:
    return "cell_" + "abcdefghijklmnopqrstuvwxyz"[i]


def temp_tag(t: float) -> str:
    return f"{t:g}C"


# ---------------------------------------------------------------------------
# charge side

def charge_voltage(q, q_end) -> np.ndarray:
    """Monotone Q -> V map with a plateau that gives the IC curve a peak."""
    s = np.asarray(q) / q_end
    return 3.4 + 0.6 * s + 0.12 * np.tanh(10.0 * (s - 0.45))


def ic_capacity(omega: float, b: float, n_steps: int, sigma: float = 0.0, rng=None) -> np.ndarray:
    """Iterate the IC recurrence from Q = 0 for ``n_steps - 1`` increments.

    With ``sigma > 0`` the noise is truncated so no increment is negative.
    """
    q = np.zeros(n_steps)
    for i in range(n_steps - 1):
        step = -omega * q[i] ** 2 + b
        if sigma > 0:
            step = max(step + sigma * rng.standard_normal(), 0.0)
        q[i + 1] = q[i] + step
    return q


def cell_fade(spec: SynthSpec, cell: int) -> float:
    # cells age at slightly different rates so leave-one-cell-out is non-trivial
    return spec.fade_rate * (1.0, 1.15, 0.85, 1.3, 0.7)[cell % 5]


def synth_cell(spec: SynthSpec, cell: int, rng) -> tuple[list[ChargeCycleRecord], dict]:
    fade = cell_fade(spec, cell)
    records = []
    truth = {c: [] for c in TRUTH_CYCLE_COLUMNS[1:]}
    for k in range(1, spec.n_cycles + 1):
        q_k = max(spec.q_n * (1.0 - fade * k), 0.0)
        soh_k = q_k / spec.q_n
        omega_k = spec.ic.omega0 + spec.ic.omega_drift * k
        b_k = spec.ic.b0 + spec.ic.b_drift * k
        q = ic_capacity(omega_k, b_k, spec.n_charge_steps, spec.noise.sigma, rng)
        v = charge_voltage(q, q[-1])
        dt = spec.charge_dt_h * (0.5 + 0.5 * soh_k)
        t = dt * np.arange(spec.n_charge_steps)
        temp = spec.temp_mean_c + spec.temp_jitter_c * rng.standard_normal()
        r = spec.r0_ohm * (1.0 + spec.r_growth * k) * (1.0 + 0.01 * rng.standard_normal())
        records.append(ChargeCycleRecord(
            cycle_index=k, time_h=t, capacity_ah=q, voltage_v=v,
            avg_temp_c=temp, internal_resistance_ohm=r, cycle_capacity_ah=q_k,
        ))
        for name, val in (("cycle_index", k), ("omega", omega_k), ("b", b_k), ("soh", soh_k),
                          ("temp_c", temp), ("resistance_ohm", r), ("charge_time_h", t[-1] - t[0])):
            truth[name].append(val)
    rul = rul_labels(truth["soh"])
    truth["rul"] = [""] * spec.n_cycles if rul is None else list(rul)
    return records, truth


# ---------------------------------------------------------------------------
# discharge side

def ocv(soc) -> np.ndarray:
    soc = np.asarray(soc)
    return 3.3 + 0.8 * soc + 0.06 * np.tanh(6.0 * (soc - 0.5))


def schedule_breakpoints(profile: str, q_n: float, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample indices and currents (A) of the piecewise-linear schedule.

    Levels repeat cyclically; each is held for ``BLOCK - RAMP`` samples and
    ramps linearly to the next over ``RAMP`` samples. The last breakpoint may
    lie beyond the final sample.
    """
    levels = np.array(PROFILES[profile]) * q_n
    idx, cur = [], []
    j = 0
    while not idx or idx[-1] < n_samples - 1:
        level = levels[j % len(levels)]
        idx += [j * BLOCK, j * BLOCK + BLOCK - RAMP]
        cur += [level, level]
        j += 1
    return np.array(idx), np.array(cur)


def schedule_current(idx, cur, n_samples: int) -> np.ndarray:
    return np.interp(np.arange(n_samples), idx, cur)


def exact_charge(idx, cur, dt: float, n_samples: int) -> np.ndarray:
    """Closed-form integral of the schedule (A h) at every sample time.

    Each finished segment adds its trapezoid area once; inside a segment the
    partial area is ``tau * (I_j + slope * tau / 2)``, exact for linear
    current.
    """
    out = np.zeros(n_samples)
    done = 0.0
    for j in range(len(idx) - 1):
        a, b = int(idx[j]), int(idx[j + 1])
        if a >= n_samples - 1:
            break
        slope = (cur[j + 1] - cur[j]) / ((b - a) * dt)
        for s in range(a + 1, min(b, n_samples - 1) + 1):
            tau = (s - a) * dt
            out[s] = done + tau * (cur[j] + 0.5 * slope * tau)
        done += (b - a) * dt * 0.5 * (cur[j] + cur[j + 1])
    return out


def profile_length(profile: str, spec: SynthSpec) -> int:
    """Samples needed to remove ``discharge_depth`` of the nominal charge."""
    levels = np.array(PROFILES[profile])
    mean_rate = levels.mean()
    hours = spec.discharge_depth / mean_rate
    return int(np.ceil(hours / spec.discharge_dt_h)) + 1


def synth_discharge(spec: SynthSpec, profile: str, temp_c: float, rng):
    n = profile_length(profile, spec)
    idx, cur = schedule_breakpoints(profile, spec.q_n, n)
    current = schedule_current(idx, cur, n)
    t = spec.discharge_dt_h * np.arange(n)
    soc_truth = 1.0 - exact_charge(idx, cur, spec.discharge_dt_h, n) / spec.q_n
    r = spec.r0_ohm * (1.0 + 0.01 * (25.0 - temp_c))
    temps = temp_c + spec.temp_jitter_c * rng.standard_normal(n)
    volts = ocv(soc_truth) - current * r + spec.voltage_noise_v * rng.standard_normal(n)
    rec = DischargeRecord(time_h=t, current_a=current, voltage_v=volts, temp_c=temps,
                          nominal_capacity_ah=spec.q_n, soc_initial=1.0)
    return rec, soc_truth


# ---------------------------------------------------------------------------
# whole dataset

def synthesize(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """Write cycle/discharge CSVs, ground-truth sidecars and manifests.

    Returns the written paths by role. An equal SynthSpec gives byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    written: dict[str, Path] = {}

    truth_rows = []
    cells = []
    for c in range(spec.n_cells):
        name = cell_name(c)
        records, truth = synth_cell(spec, c, rng)
        path = out / f"cycles_{name}.csv"
        save_cycles(path, records)
        written[f"cycles:{name}"] = path
        cells.append(name)
        for i in range(spec.n_cycles):
            truth_rows.append([name] + [truth[col][i] for col in TRUTH_CYCLE_COLUMNS[1:]])
    write_csv(out / "truth_cycles.csv", TRUTH_CYCLE_COLUMNS, truth_rows)
    written["truth_cycles"] = out / "truth_cycles.csv"

    soc_rows = []
    soc_files = {}
    for temp in spec.discharge_temps_c:
        tag = temp_tag(temp)
        for profile in spec.profiles:
            rec, soc_truth = synth_discharge(spec, profile, temp, rng)
            path = out / f"discharge_{profile}_{tag}.csv"
            save_discharge(path, rec)
            written[f"discharge:{profile}:{tag}"] = path
            soc_files.setdefault(tag, []).append((profile, path.name))
            key = f"{profile}_{tag}"
            soc_rows.extend((key, t, s) for t, s in zip(rec.time_h, soc_truth))
    write_csv(out / "truth_discharge.csv", TRUTH_DISCHARGE_COLUMNS, soc_rows)
    written["truth_discharge"] = out / "truth_discharge.csv"

    for tag, files in soc_files.items():
        test = "FUDS" if "FUDS" in dict(files) else files[-1][0]
        m = DatasetManifest(
            task="soc", temperature_tag=tag, window_len=spec.soc_window_len,
            files=[ManifestFile(p, "test" if g == test else "train", g) for g, p in files],
        )
        path = out / f"manifest_soc_{tag}.json"
        path.write_text(m.to_json(), encoding="utf-8")
        written[f"manifest:soc:{tag}"] = path

    if spec.n_cells >= 2:
        for task in ("rul", "soh"):
            m = DatasetManifest(
                task=task,
                files=[ManifestFile(f"cycles_{n}.csv", "test" if i == len(cells) - 1 else "train", n)
                       for i, n in enumerate(cells)],
            )
            path = out / f"manifest_{task}.json"
            path.write_text(m.to_json(), encoding="utf-8")
            written[f"manifest:{task}"] = path
    return written
