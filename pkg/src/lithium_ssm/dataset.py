"""File formats: cycle and discharge CSVs, ground-truth sidecars, dataset
manifests, and model checkpoints.

CSV dialect everywhere: UTF-8, comma separated, dot decimal, one header
row. Floats are written with ``repr`` so a write/read round trip is exact.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointShapeError,
    ConfigError,
    DataError,
    DomainError,
    SchemaError,
)
from .features import (
    ChargeCycleRecord,
    DischargeRecord,
    build_cycle_features,
    coulomb_count,
    rul_labels,
    soh,
    step_features,
)
from .model import ModelConfig, ModelParameters
from .training import LabeledSequence

CYCLE_COLUMNS = ("cycle_index", "time_h", "capacity_ah", "voltage_v", "avg_temp_c",
                 "internal_resistance_ohm", "cycle_capacity_ah")
DISCHARGE_COLUMNS = ("time_h", "current_a", "voltage_v", "temp_c")
TRUTH_CYCLE_COLUMNS = ("cell", "cycle_index", "omega", "b", "soh", "rul", "temp_c",
                       "resistance_ohm", "charge_time_h")
TRUTH_DISCHARGE_COLUMNS = ("profile", "time_h", "soc")

TASKS = ("rul", "soh", "soc")


def fmt(x) -> str:
    """Shortest round-tripping text for a float (or int)."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header, rows, comments=()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def _read_table(path, required):
    """Return ``(comments, rows)`` where rows are ``(line_no, dict)``."""
    comments = {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        body = lines[start][1:].strip()
        if "=" in body:
            k, v = body.split("=", 1)
            comments[k.strip()] = v.strip()
        start += 1
    if start >= len(lines):
        raise DataError("file has no header row", f"{path}")
    reader = csv.reader(lines[start:])
    header = [h.strip() for h in next(reader)]
    for col in required:
        if col not in header:
            raise SchemaError(col, path)
    rows = []
    for offset, raw in enumerate(reader, start=start + 2):
        if not raw or all(not c.strip() for c in raw):
            continue
        if len(raw) != len(header):
            raise DataError(f"expected {len(header)} fields, got {len(raw)}", f"row {offset}")
        rows.append((offset, dict(zip(header, (c.strip() for c in raw)))))
    return comments, rows


def _float(row, col, line):
    try:
        return float(row[col])
    except ValueError:
        raise DataError(f"column {col!r} is not a number: {row[col]!r}", f"row {line}") from None


# ---------------------------------------------------------------------------
# cycle and discharge files

def load_cycles(path) -> list[ChargeCycleRecord]:
    _, rows = _read_table(path, CYCLE_COLUMNS)
    grouped: dict[int, list] = {}
    for line, row in rows:
        try:
            k = int(row["cycle_index"])
        except ValueError:
            raise DataError(f"cycle_index is not an integer: {row['cycle_index']!r}",
                            f"row {line}") from None
        grouped.setdefault(k, []).append((line, row))

    records = []
    for k, members in grouped.items():
        t = np.array([_float(r, "time_h", ln) for ln, r in members])
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            ln = members[bad[0] + 1][0]
            raise DataError(f"time not strictly increasing within cycle {k} at row {ln}",
                            f"cycle {k}")
        first_line, first = members[0]
        records.append(ChargeCycleRecord(
            cycle_index=k,
            time_h=t,
            capacity_ah=np.array([_float(r, "capacity_ah", ln) for ln, r in members]),
            voltage_v=np.array([_float(r, "voltage_v", ln) for ln, r in members]),
            avg_temp_c=_float(first, "avg_temp_c", first_line),
            internal_resistance_ohm=_float(first, "internal_resistance_ohm", first_line),
            cycle_capacity_ah=_float(first, "cycle_capacity_ah", first_line),
        ))
    records.sort(key=lambda r: r.cycle_index)
    return records


def save_cycles(path, records: list[ChargeCycleRecord]) -> None:
    rows = []
    for rec in records:
        for t, q, v in zip(rec.time_h, rec.capacity_ah, rec.voltage_v):
            rows.append((rec.cycle_index, t, q, v, rec.avg_temp_c,
                         rec.internal_resistance_ohm, rec.cycle_capacity_ah))
    write_csv(path, CYCLE_COLUMNS, rows)


def load_discharge(path) -> DischargeRecord:
    meta, rows = _read_table(path, DISCHARGE_COLUMNS)
    for key in ("q_n_ah", "soc_0"):
        if key not in meta:
            raise SchemaError(f"# {key}", path)
    try:
        q_n = float(meta["q_n_ah"])
        soc_0 = float(meta["soc_0"])
    except ValueError:
        raise DataError("metadata q_n_ah / soc_0 is not a number", "header") from None
    if not q_n > 0:
        raise DomainError(f"q_n_ah must be > 0, got {q_n}", "header")
    cols = {c: np.array([_float(r, c, ln) for ln, r in rows]) for c in DISCHARGE_COLUMNS}
    bad = np.flatnonzero(np.diff(cols["time_h"]) <= 0)
    if bad.size:
        ln = rows[bad[0] + 1][0]
        raise DataError("duplicate or decreasing timestamp", f"row {ln}")
    return DischargeRecord(
        time_h=cols["time_h"], current_a=cols["current_a"], voltage_v=cols["voltage_v"],
        temp_c=cols["temp_c"], nominal_capacity_ah=q_n, soc_initial=soc_0,
    )


def save_discharge(path, rec: DischargeRecord) -> None:
    rows = zip(rec.time_h, rec.current_a, rec.voltage_v, rec.temp_c)
    write_csv(path, DISCHARGE_COLUMNS, rows,
              comments=(f"q_n_ah={fmt(rec.nominal_capacity_ah)}", f"soc_0={fmt(rec.soc_initial)}"))


def load_truth_cycles(path) -> dict[str, dict[str, np.ndarray]]:
    """Per-cell ground truth; ``rul`` is NaN where the cell never reaches EOL."""
    _, rows = _read_table(path, TRUTH_CYCLE_COLUMNS)
    out: dict[str, dict[str, list]] = {}
    for line, row in rows:
        cell = out.setdefault(row["cell"], {c: [] for c in TRUTH_CYCLE_COLUMNS[1:]})
        for c in TRUTH_CYCLE_COLUMNS[1:]:
            cell[c].append(float("nan") if row[c] == "" else _float(row, c, line))
    return {k: {c: np.array(v) for c, v in cols.items()} for k, cols in out.items()}


def load_truth_discharge(path) -> dict[str, dict[str, np.ndarray]]:
    _, rows = _read_table(path, TRUTH_DISCHARGE_COLUMNS)
    out: dict[str, dict[str, list]] = {}
    for line, row in rows:
        d = out.setdefault(row["profile"], {"time_h": [], "soc": []})
        d["time_h"].append(_float(row, "time_h", line))
        d["soc"].append(_float(row, "soc", line))
    return {k: {c: np.array(v) for c, v in cols.items()} for k, cols in out.items()}


# ---------------------------------------------------------------------------
# manifests and splits

@dataclass
class ManifestFile:
    path: str
    role: str
    group: str = ""


@dataclass
class DatasetManifest:
    task: str
    files: list[ManifestFile]
    temperature_tag: str | None = None
    window_len: int | None = None
    base_dir: Path = field(default=Path("."), repr=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"manifest task must be one of {TASKS}, got {self.task!r}")
        roles = {f.role for f in self.files}
        if not roles <= {"train", "test"}:
            raise ConfigError(f"file roles must be train/test, got {sorted(roles)}")
        if "train" not in roles or "test" not in roles:
            raise ConfigError("manifest needs at least one train and one test file")
        if self.window_len is not None and self.window_len < 2:
            raise ConfigError(f"window_len must be >= 2, got {self.window_len}")

    def resolve(self, f: ManifestFile) -> Path:
        p = Path(f.path)
        return p if p.is_absolute() else self.base_dir / p

    def to_json(self) -> str:
        body = {
            "task": self.task,
            "temperature_tag": self.temperature_tag,
            "window_len": self.window_len,
            "files": [{"path": f.path, "role": f.role, "group": f.group} for f in self.files],
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            body = json.loads(path.read_text(encoding="utf-8"))
            files = [ManifestFile(f["path"], f["role"], f.get("group", "")) for f in body["files"]]
            return cls(task=body["task"], files=files,
                       temperature_tag=body.get("temperature_tag"),
                       window_len=body.get("window_len"), base_dir=path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"malformed manifest {path}: {exc}") from None

    def with_test_group(self, group: str) -> "DatasetManifest":
        """Leave-one-group-out: ``group`` becomes test, every other group train."""
        groups = {f.group for f in self.files}
        if group not in groups:
            raise ConfigError(f"test group {group!r} not in manifest groups {sorted(groups)}")
        files = [ManifestFile(f.path, "test" if f.group == group else "train", f.group)
                 for f in self.files]
        return DatasetManifest(self.task, files, self.temperature_tag, self.window_len, self.base_dir)


def _check_disjoint_groups(manifest: DatasetManifest) -> None:
    roles: dict[str, set] = {}
    for f in manifest.files:
        roles.setdefault(f.group or f.path, set()).add(f.role)
    both = sorted(g for g, r in roles.items() if len(r) > 1)
    if both:
        raise ConfigError(f"group(s) {both} are marked both train and test")


def window_bounds(length: int, window_len: int | None, stride: int | None = None):
    """``(start, stop)`` pairs; non-overlapping unless ``stride < window_len``."""
    if window_len is None or window_len >= length:
        return [(0, length)]
    stride = window_len if stride is None else stride
    if stride < 1:
        raise ConfigError("window stride must be >= 1")
    bounds = []
    start = 0
    while start < length:
        bounds.append((start, min(start + window_len, length)))
        if start + window_len >= length:
            break
        start += stride
    return bounds


def soc_sequences(rec: DischargeRecord, name: str, group: str, window_len=None,
                  stride=None) -> list[LabeledSequence]:
    feats = step_features(rec)
    labels = coulomb_count(rec)
    return [
        LabeledSequence(feats[a:b], labels[a:b], name=f"{name}[{a}:{b}]", unit="fraction", group=group)
        for a, b in window_bounds(len(rec), window_len, stride)
    ]


def make_soc_splits(manifest: DatasetManifest, stride: int | None = None):
    """Train and test sequences for the SOC task.

    Test files are never windowed into the training list; each record is
    chunked into windows of ``manifest.window_len`` when set.
    """
    if manifest.task != "soc":
        raise ConfigError(f"make_soc_splits needs a soc manifest, got {manifest.task!r}")
    _check_disjoint_groups(manifest)
    train, test = [], []
    for f in manifest.files:
        rec = load_discharge(manifest.resolve(f))
        name = f.group or Path(f.path).stem
        seqs = soc_sequences(rec, name, f.group, manifest.window_len, stride)
        (train if f.role == "train" else test).extend(seqs)
    return train, test


def cycle_table(records: list[ChargeCycleRecord], nominal_capacity_ah: float,
                smoothing_window: int = 5, eol_threshold: float = 0.8):
    """Features (K, 8), SOH (K,) and RUL (K,) for one cell; RUL is ``None``
    when the cell never reaches end of life."""
    feats = np.array([build_cycle_features(r, smoothing_window).as_array() for r in records])
    soh_k = soh(np.array([r.cycle_capacity_ah for r in records]), nominal_capacity_ah)
    return feats, np.atleast_1d(soh_k), rul_labels(soh_k, eol_threshold)


def cycle_sequence(records, task: str, nominal_capacity_ah: float, name: str, group: str = "",
                   smoothing_window: int = 5, eol_threshold: float = 0.8) -> LabeledSequence:
    feats, soh_k, rul = cycle_table(records, nominal_capacity_ah, smoothing_window, eol_threshold)
    if task == "soh":
        return LabeledSequence(feats, soh_k, name=name, unit="fraction", group=group)
    if rul is None:
        raise DataError(f"cell {name!r} never falls below SOH {eol_threshold}; RUL is undefined")
    return LabeledSequence(feats, rul.astype(np.float64), name=name, unit="cycle", group=group)


def make_cycle_splits(manifest: DatasetManifest, nominal_capacity_ah: float,
                      smoothing_window: int = 5, eol_threshold: float = 0.8):
    """One sequence per cell file (cycle index as the time axis)."""
    if manifest.task not in ("rul", "soh"):
        raise ConfigError(f"make_cycle_splits needs a rul/soh manifest, got {manifest.task!r}")
    _check_disjoint_groups(manifest)
    train, test = [], []
    for f in manifest.files:
        name = f.group or Path(f.path).stem
        seq = cycle_sequence(load_cycles(manifest.resolve(f)), manifest.task, nominal_capacity_ah,
                             name, f.group, smoothing_window, eol_threshold)
        (train if f.role == "train" else test).append(seq)
    return train, test


# ---------------------------------------------------------------------------
# checkpoints
#
#   lithium-ssm-checkpoint 1
#   config feature_dim=3 d_model=16 d_state=16 n_layers=1 head_mode=per-step
#   tensor <name> float64 <dim> [<dim> ...]
#   <row-major values as hex floats, space separated>
#   ...
#   end <tensor count>

CHECKPOINT_MAGIC = "lithium-ssm-checkpoint 1"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParameters
    extras: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(p: ModelParameters, path, config: ModelConfig, extras=None) -> None:
    p.check(config)
    tensors = dict(p.named())
    for k, v in (extras or {}).items():
        tensors[k] = np.asarray(v, dtype=np.float64)
    lines = [
        CHECKPOINT_MAGIC,
        "config " + " ".join(f"{k}={getattr(config, k)}" for k in
                             ("feature_dim", "d_model", "d_state", "n_layers", "head_mode")),
    ]
    for name, arr in tensors.items():
        lines.append(f"tensor {name} float64 " + " ".join(str(s) for s in arr.shape))
        lines.append(" ".join(float(v).hex() for v in arr.ravel()))
    lines.append(f"end {len(tensors)}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _parse_config_line(line: str) -> ModelConfig:
    if not line.startswith("config "):
        raise CheckpointError("missing config line", "line 2")
    kv = dict(item.split("=", 1) for item in line.split()[1:])
    try:
        return ModelConfig(feature_dim=int(kv["feature_dim"]), d_model=int(kv["d_model"]),
                           d_state=int(kv["d_state"]), n_layers=int(kv["n_layers"]),
                           head_mode=kv["head_mode"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad config line: {exc}", "line 2") from None


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint completely before returning anything."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a lithium-ssm checkpoint", "line 1")
    if len(lines) < 2:
        raise CheckpointError("truncated checkpoint", "line 2")
    config = _parse_config_line(lines[1])
    tensors: dict[str, np.ndarray] = {}
    i = 2
    ended = False
    while i < len(lines):
        line = lines[i]
        if line.startswith("end "):
            try:
                count = int(line.split()[1])
            except ValueError:
                raise CheckpointError("bad end marker", f"line {i + 1}") from None
            if count != len(tensors):
                raise CheckpointError(f"end marker says {count} tensors, read {len(tensors)}",
                                      f"line {i + 1}")
            ended = True
            break
        parts = line.split()
        if len(parts) < 3 or parts[0] != "tensor" or parts[2] != "float64":
            raise CheckpointError(f"expected tensor header, got {line[:40]!r}", f"line {i + 1}")
        name = parts[1]
        try:
            shape = tuple(int(s) for s in parts[3:])
        except ValueError:
            raise CheckpointError(f"bad shape for {name!r}", f"line {i + 1}") from None
        if i + 1 >= len(lines):
            raise CheckpointError(f"truncated checkpoint: no values for {name!r}", f"line {i + 2}")
        tokens = lines[i + 1].split()
        size = int(np.prod(shape)) if shape else 1
        if len(tokens) != size:
            raise CheckpointError(f"tensor {name!r}: expected {size} values, found {len(tokens)}",
                                  f"line {i + 2}")
        try:
            values = np.array([float.fromhex(tok) for tok in tokens], dtype=np.float64)
        except ValueError:
            raise CheckpointError(f"tensor {name!r}: unparsable value", f"line {i + 2}") from None
        tensors[name] = values.reshape(shape)
        i += 2
    if not ended:
        raise CheckpointError("truncated checkpoint: missing end marker", f"line {len(lines)}")

    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("scaler.")}
    extras = {k: v for k, v in tensors.items() if k.startswith("scaler.")}
    expected = config.tensor_shapes()
    for name, shape in expected.items():
        if name not in model_tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        if model_tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name!r} has shape {model_tensors[name].shape}, "
                                  f"header config implies {shape}")
    return Checkpoint(config, ModelParameters.from_named(model_tensors), extras)


def load_checkpoint(path, config: ModelConfig | None = None) -> ModelParameters:
    """Load parameters; with ``config``, every tensor shape must match it."""
    ckpt = read_checkpoint(path)
    if config is not None:
        named = ckpt.params.named()
        for name, shape in config.tensor_shapes().items():
            if name not in named:
                raise CheckpointShapeError(name, shape, ())
            if named[name].shape != shape:
                raise CheckpointShapeError(name, shape, named[name].shape)
        extra = sorted(set(named) - set(config.tensor_shapes()))
        if extra:
            raise CheckpointShapeError(extra[0], (), named[extra[0]].shape)
    return ckpt.params
