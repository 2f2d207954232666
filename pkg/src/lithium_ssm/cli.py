"""Command-line front end.

    lithium-ssm synth            --output-dir OUT [--seed N]
    lithium-ssm extract-features --output-dir OUT [--config FILE] [--set key=value ...]
    lithium-ssm train            --output-dir OUT ...
    lithium-ssm predict          --output-dir OUT ...
    lithium-ssm eval             --output-dir OUT ...

Every subcommand reads and writes under OUT (``LITHIUM_SSM_OUTPUT_DIR`` is
the default). Exit codes: 0 ok, 1 configuration error, 2 data error,
3 numerical abort; failures print one ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend
from .dataset import (
    DatasetManifest,
    cycle_sequence,
    fmt,
    load_checkpoint,
    load_cycles,
    load_discharge,
    read_checkpoint,
    save_checkpoint,
    soc_sequences,
    write_csv,
)
from .errors import (
    ConfigError,
    DataError,
    EvaluationError,
    LithiumSsmError,
    NumericalAbort,
)
from .features import CYCLE_FEATURE_NAMES, STEP_FEATURE_NAMES, NoiseSpec
from .model import ModelConfig
from .synth import SynthSpec, synthesize
from .training import (
    LabeledSequence,
    Scalers,
    TrainConfig,
    fit_scalers,
    predict_sequence,
    reporting_unit,
    rmse,
    train,
)

log = logging.getLogger("lithium_ssm")

# key -> (type, default). Config files use ``key = value`` lines.
OPTIONS = {
    "task": (str, "soc"),
    "data_dir": (str, "data"),
    "manifest": (str, ""),
    "test_group": (str, ""),
    "window_len": (int, 0),
    "window_stride": (int, 0),
    "nominal_capacity_ah": (float, 1.1),
    "smoothing_window": (int, 5),
    "eol_threshold": (float, 0.8),
    "d_model": (int, 16),
    "d_state": (int, 16),
    "n_layers": (int, 1),
    "head_mode": (str, "per-step"),
    "learning_rate": (float, 0.01),
    "epochs": (int, 100),
    "batch_size": (int, 4),
    "seed": (int, 0),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "synth_n_cycles": (int, 150),
    "synth_n_cells": (int, 3),
    "synth_fade_rate": (float, 0.002),
    "synth_noise_sigma": (float, 0.0),
    "synth_temps_c": (str, "25"),
}

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


def _coerce(key: str, raw: str):
    if key not in OPTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = OPTIONS[key][0]
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {typ.__name__}, got {raw!r}") from None


def parse_config_text(text: str, origin: str = "config") -> dict:
    """``key = value`` per line; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin} line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, raw)
    return out


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = (s.strip() for s in pair.split("=", 1))
        out[key] = _coerce(key, raw)
    return out


@dataclass
class RunContext:
    command: str
    out: Path
    options: dict
    overrides: dict
    config_path: str | None

    def opt(self, key):
        return self.options[key]

    @property
    def data_dir(self) -> Path:
        p = Path(self.opt("data_dir"))
        return p if p.is_absolute() else self.out / p

    def model_config(self, feature_dim: int) -> ModelConfig:
        try:
            return ModelConfig(feature_dim=feature_dim, d_model=self.opt("d_model"),
                               d_state=self.opt("d_state"), n_layers=self.opt("n_layers"),
                               head_mode=self.opt("head_mode"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(learning_rate=self.opt("learning_rate"), epochs=self.opt("epochs"),
                               adam_beta1=self.opt("adam_beta1"), adam_beta2=self.opt("adam_beta2"),
                               adam_eps=self.opt("adam_eps"), seed=self.opt("seed"),
                               batch_size=self.opt("batch_size"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def build_context(args) -> RunContext:
    options = {k: v[1] for k, v in OPTIONS.items()}
    config_path = args.config
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from None
        options.update(parse_config_text(text, config_path))
    overrides = parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    options.update(overrides)
    if options["task"] not in ("rul", "soh", "soc"):
        raise ConfigError(f"task must be rul, soh or soc, got {options['task']!r}")
    out = args.output_dir or os.environ.get("LITHIUM_SSM_OUTPUT_DIR")
    if not out:
        raise ConfigError("no output directory: pass --output-dir or set LITHIUM_SSM_OUTPUT_DIR")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return RunContext(args.command, out, options, overrides, config_path)


# ---------------------------------------------------------------------------
# run manifest

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _rel(ctx: RunContext, path) -> str:
    try:
        return Path(path).resolve().relative_to(ctx.out.resolve()).as_posix()
    except ValueError:
        return str(path)


def write_run_manifest(ctx: RunContext, inputs, outputs, metrics=None) -> Path:
    body = {
        "command": ctx.command,
        "config_file": ctx.config_path,
        "options": ctx.options,
        "overrides": ctx.overrides,
        "seed": ctx.opt("seed"),
        "inputs": {_rel(ctx, p): sha256(p) for p in inputs},
        "outputs": {_rel(ctx, p): sha256(p) for p in outputs},
        "metrics": metrics or {},
        "versions": {"lithium_ssm": __version__, "numpy": np.__version__,
                     "python": platform.python_version(), "backend": backend()},
    }
    path = ctx.out / f"manifest_{ctx.command.replace('-', '_')}.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# features table: one row per step of every sequence
#
#   # task=<task>
#   # unit=<label unit>
#   split,group,sequence,axis,<feature columns...>,target

def _manifest_path(ctx: RunContext) -> Path:
    if ctx.opt("manifest"):
        p = Path(ctx.opt("manifest"))
        return p if p.is_absolute() else ctx.out / p
    task = ctx.opt("task")
    if task == "soc":
        found = sorted(ctx.data_dir.glob("manifest_soc_*.json"))
        if not found:
            raise ConfigError(f"no SOC manifest in {ctx.data_dir}; run synth or set manifest=")
        return found[0]
    return ctx.data_dir / f"manifest_{task}.json"


def load_manifest(ctx: RunContext) -> DatasetManifest:
    path = _manifest_path(ctx)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    m = DatasetManifest.from_json(path)
    if m.task != ctx.opt("task"):
        raise ConfigError(f"manifest {path} is for task {m.task!r}, config says {ctx.opt('task')!r}")
    if ctx.opt("test_group"):
        m = m.with_test_group(ctx.opt("test_group"))
    if ctx.opt("window_len"):
        m.window_len = ctx.opt("window_len")
        m.__post_init__()
    return m


def extract(ctx: RunContext):
    """Build labelled sequences for the configured task; returns
    ``(rows, header, unit, inputs)``."""
    m = load_manifest(ctx)
    task = m.task
    stride = ctx.opt("window_stride") or None
    groups: dict[str, set] = {}
    for f in m.files:
        groups.setdefault(f.group or f.path, set()).add(f.role)
    both = sorted(g for g, r in groups.items() if len(r) > 1)
    if both:
        raise ConfigError(f"group(s) {both} are marked both train and test")

    rows = []
    inputs = [_manifest_path(ctx)]
    unit = None
    for f in m.files:
        path = m.resolve(f)
        inputs.append(path)
        group = f.group or Path(f.path).stem
        if task == "soc":
            rec = load_discharge(path)
            seqs = soc_sequences(rec, group, group, m.window_len, stride)
            axis = rec.time_h
            names = STEP_FEATURE_NAMES
            offset = 0
            for s in seqs:
                for i in range(len(s)):
                    rows.append([f.role, group, s.name, axis[offset + i], *s.features[i], s.targets[i]])
                offset += len(s)
        else:
            records = load_cycles(path)
            s = cycle_sequence(records, task, ctx.opt("nominal_capacity_ah"), group, group,
                               ctx.opt("smoothing_window"), ctx.opt("eol_threshold"))
            seqs = [s]
            names = CYCLE_FEATURE_NAMES
            for i, rec in enumerate(records):
                rows.append([f.role, group, s.name, rec.cycle_index, *s.features[i], s.targets[i]])
        unit = seqs[0].unit
    header = ["split", "group", "sequence", "axis", *names, "target"]
    return rows, header, unit, inputs


def read_features(path: Path):
    """Inverse of the features table writer; returns ``(task, unit, {split: [seq]}, axes)``."""
    if not path.exists():
        raise DataError(f"features table not found: {path} (run extract-features first)")
    meta = {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        k, _, v = lines[i][1:].strip().partition("=")
        meta[k.strip()] = v.strip()
        i += 1
    reader = csv.reader(lines[i:])
    header = next(reader)
    fixed = ["split", "group", "sequence", "axis"]
    if header[:4] != fixed or header[-1] != "target":
        raise DataError(f"features table {path} has an unexpected header", "row 1")
    n_feat = len(header) - 5
    seqs: dict[str, dict] = {}
    for line_no, row in enumerate(reader, start=i + 2):
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields", f"row {line_no}")
        try:
            vals = [float(v) for v in row[3:]]
        except ValueError:
            raise DataError("non-numeric value", f"row {line_no}") from None
        key = (row[0], row[2])
        entry = seqs.setdefault(key, {"group": row[1], "axis": [], "x": [], "y": []})
        entry["axis"].append(vals[0])
        entry["x"].append(vals[1:1 + n_feat])
        entry["y"].append(vals[-1])
    unit = meta.get("unit", "fraction")
    splits: dict[str, list] = {"train": [], "test": []}
    axes: dict[str, np.ndarray] = {}
    for (split, name), e in seqs.items():
        if split not in splits:
            raise DataError(f"unknown split {split!r} for sequence {name!r}")
        splits[split].append(LabeledSequence(np.array(e["x"]), np.array(e["y"]), name=name,
                                             unit=unit, group=e["group"]))
        axes[name] = np.array(e["axis"])
    return meta.get("task", ""), unit, splits, axes


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(ctx: RunContext) -> dict:
    try:
        temps = tuple(float(t) for t in str(ctx.opt("synth_temps_c")).split(",") if t.strip())
        spec = SynthSpec(seed=ctx.opt("seed"), n_cycles=ctx.opt("synth_n_cycles"),
                         n_cells=ctx.opt("synth_n_cells"), fade_rate=ctx.opt("synth_fade_rate"),
                         noise=NoiseSpec(ctx.opt("synth_noise_sigma")), discharge_temps_c=temps)
    except ValueError as exc:
        raise ConfigError(f"invalid synth settings: {exc}") from None
    written = synthesize(spec, ctx.data_dir)
    write_run_manifest(ctx, [], written.values())
    return {"files": len(written)}


def cmd_extract(ctx: RunContext) -> dict:
    rows, header, unit, inputs = extract(ctx)
    path = ctx.out / "features.csv"
    write_csv(path, header, rows, comments=(f"task={ctx.opt('task')}", f"unit={unit}"))
    write_run_manifest(ctx, inputs, [path])
    return {"rows": len(rows)}


def _load_features(ctx: RunContext):
    path = ctx.out / "features.csv"
    task, unit, splits, axes = read_features(path)
    if task and task != ctx.opt("task"):
        raise ConfigError(f"features.csv was extracted for task {task!r}, config says {ctx.opt('task')!r}")
    if not splits["train"] and ctx.command == "train":
        raise DataError("features.csv has no training rows")
    return path, unit, splits, axes


def cmd_train(ctx: RunContext) -> dict:
    feat_path, unit, splits, _ = _load_features(ctx)
    reporting_unit(ctx.opt("task"), unit)
    train_seqs = splits["train"]
    config = ctx.model_config(train_seqs[0].features.shape[1])
    scalers = fit_scalers(train_seqs)
    result = train(config, [scalers.apply(s) for s in train_seqs], ctx.train_config())

    ckpt = ctx.out / "model.ckpt"
    save_checkpoint(result.params, ckpt, config, extras=scalers.named())
    trace = ctx.out / "loss_trace.csv"
    write_csv(trace, ("epoch", "mean_l1"), [(i + 1, v) for i, v in enumerate(result.loss_trace)])
    metrics = {"initial_l1": result.initial_loss, "final_l1": result.final_loss}
    write_run_manifest(ctx, [feat_path], [ckpt, trace], metrics)
    return metrics


def _restore(ctx: RunContext, feature_dim: int):
    path = ctx.out / "model.ckpt"
    if not path.exists():
        raise DataError(f"checkpoint not found: {path} (run train first)")
    config = ctx.model_config(feature_dim)
    params = load_checkpoint(path, config)
    scalers = Scalers.from_named(read_checkpoint(path).extras)
    return path, config, params, scalers


def _write_curves(ctx, config, params, scalers, tests, axes, factor):
    """One CSV per test group: cycle_or_time, actual, predicted (reporting units)."""
    by_group: dict[str, list] = {}
    preds, targets = [], []
    for seq in tests:
        pred = predict_sequence(params, config, scalers, seq) * factor
        actual = seq.targets * factor
        axis = axes[seq.name]
        if config.head_mode == "last-step":
            actual, axis = actual[-1:], axis[-1:]
        preds.append(pred)
        targets.append(actual)
        by_group.setdefault(seq.group or seq.name, []).extend(zip(axis, actual, pred))
    written = []
    for group, rows in by_group.items():
        path = ctx.out / f"curve_{group}.csv"
        write_csv(path, ("cycle_or_time", "actual", "predicted"), rows)
        written.append(path)
    return written, np.concatenate(preds), np.concatenate(targets)


def cmd_predict(ctx: RunContext) -> dict:
    feat_path, unit, splits, axes = _load_features(ctx)
    tests = splits["test"]
    if not tests:
        raise DataError("features.csv has no test rows")
    _, factor = reporting_unit(ctx.opt("task"), unit)
    ckpt, config, params, scalers = _restore(ctx, tests[0].features.shape[1])
    curves, _, _ = _write_curves(ctx, config, params, scalers, tests, axes, factor)
    write_run_manifest(ctx, [feat_path, ckpt], curves)
    return {"curves": len(curves)}


def cmd_eval(ctx: RunContext) -> dict:
    feat_path, unit, splits, axes = _load_features(ctx)
    tests = splits["test"]
    if not tests:
        raise DataError("features.csv has no test rows")
    report_unit, factor = reporting_unit(ctx.opt("task"), unit)
    ckpt, config, params, scalers = _restore(ctx, tests[0].features.shape[1])
    curves, pred, target = _write_curves(ctx, config, params, scalers, tests, axes, factor)
    value = rmse(pred, target)
    if not np.isfinite(value):
        raise EvaluationError("RMSE is not finite")
    metric = f"rmse_{report_unit}"
    metrics_path = ctx.out / "metrics.csv"
    write_csv(metrics_path, ("metric", "value"),
              [(metric, value), ("n_points", int(pred.size))])
    write_run_manifest(ctx, [feat_path, ckpt], [metrics_path, *curves], {metric: value})
    return {metric: value}


COMMANDS = {
    "synth": cmd_synth,
    "extract-features": cmd_extract,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lithium-ssm", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="key = value config file")
        p.add_argument("-o", "--output-dir", help="artifact directory (default $LITHIUM_SSM_OUTPUT_DIR)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    reason = " ".join(str(exc).split())
    print(f"error: code={code} kind={type(exc).__name__} reason={reason}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = build_context(args)
        result = COMMANDS[args.command](ctx)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (NumericalAbort, EvaluationError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (DataError, LithiumSsmError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    summary = " ".join(f"{k}={fmt(v) if isinstance(v, float) else v}" for k, v in result.items())
    print(f"{args.command}: ok {summary}".rstrip())
    return 0


def main() -> None:
    sys.exit(run())
