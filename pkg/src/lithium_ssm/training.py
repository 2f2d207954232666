"""Z-score scaling, Adam, the epoch loop, and RMSE evaluation in task units."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, InsufficientDataError, NumericalAbort
from .model import ModelConfig, ModelParameters, backward, forward, init_parameters

log = logging.getLogger(__name__)

CONSTANT_STD = 1e-12

# label unit accepted per task, and the factor taking it to the reporting unit
TASK_UNITS = {
    "rul": {"cycle": ("cycle", 1.0)},
    "soh": {"fraction": ("percent", 100.0), "percent": ("percent", 1.0)},
    "soc": {"fraction": ("percent", 100.0), "percent": ("percent", 1.0)},
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    batch_size: int = 4

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class LabeledSequence:
    """Features (L, F) with per-step targets (L,).

    In last-step mode only ``targets[-1]`` is used.
    """

    features: np.ndarray
    targets: np.ndarray
    name: str = ""
    unit: str = "fraction"
    group: str = ""

    def __post_init__(self):
        object.__setattr__(self, "features", np.atleast_2d(np.asarray(self.features, dtype=np.float64)))
        object.__setattr__(self, "targets", np.atleast_1d(np.asarray(self.targets, dtype=np.float64)))
        if self.features.shape[0] != self.targets.shape[0]:
            raise DimensionError(
                f"sequence {self.name!r}: {self.features.shape[0]} feature rows vs "
                f"{self.targets.shape[0]} targets"
            )

    def __len__(self):
        return self.features.shape[0]


# ---------------------------------------------------------------------------
# scaling

@dataclass(frozen=True)
class ZScoreScaler:
    mean: np.ndarray
    std: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.std < CONSTANT_STD

    def _safe_std(self):
        return np.where(self.constant, 1.0, self.std)

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        z = (x - self.mean) / self._safe_std()
        return np.where(self.constant, 0.0, z)

    def inverse_transform(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return z * self._safe_std() + self.mean


def fit_scaler(rows) -> ZScoreScaler:
    """Population mean and std per column of a (n, F) array (or a 1-D series)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    if rows.shape[0] == 0:
        raise InsufficientDataError("cannot fit a scaler on zero rows")
    mean = rows.mean(axis=0)
    std = np.sqrt(((rows - mean) ** 2).mean(axis=0))
    return ZScoreScaler(mean=mean, std=std)


@dataclass(frozen=True)
class Scalers:
    features: ZScoreScaler
    targets: ZScoreScaler

    def apply(self, seq: LabeledSequence) -> LabeledSequence:
        return LabeledSequence(
            features=self.features.transform(seq.features),
            targets=self.targets.transform(seq.targets[:, None])[:, 0],
            name=seq.name, unit=seq.unit, group=seq.group,
        )

    def named(self) -> dict[str, np.ndarray]:
        return {
            "scaler.feature_mean": self.features.mean,
            "scaler.feature_std": self.features.std,
            "scaler.target_mean": self.targets.mean,
            "scaler.target_std": self.targets.std,
        }

    @classmethod
    def from_named(cls, t: dict[str, np.ndarray]) -> "Scalers":
        return cls(ZScoreScaler(t["scaler.feature_mean"], t["scaler.feature_std"]),
                   ZScoreScaler(t["scaler.target_mean"], t["scaler.target_std"]))


def fit_scalers(train: list[LabeledSequence]) -> Scalers:
    """Fit feature and target scalers on training sequences only."""
    if not train:
        raise InsufficientDataError("no training sequences")
    return Scalers(
        features=fit_scaler(np.concatenate([s.features for s in train])),
        targets=fit_scaler(np.concatenate([s.targets for s in train])),
    )


# ---------------------------------------------------------------------------
# Adam

@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, p: ModelParameters) -> "AdamState":
        named = p.named()
        return cls(m={k: np.zeros_like(a) for k, a in named.items()},
                   v={k: np.zeros_like(a) for k, a in named.items()}, t=0)


def adam_step(p: ModelParameters, g: ModelParameters, s: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    t = s.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    grads = g.named()
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in p.named().items():
        gi = grads[name]
        if gi.shape != theta.shape:
            raise DimensionError(f"{name}: gradient {gi.shape} vs parameter {theta.shape}")
        m = b1 * s.m[name] + (1.0 - b1) * gi
        v = b2 * s.v[name] + (1.0 - b2) * (gi * gi)
        m_hat = m / bc1
        v_hat = v / bc2
        new_p[name] = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name] = m
        new_v[name] = v
    return ModelParameters.from_named(new_p), AdamState(m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# training

def _sequence_target(seq: LabeledSequence, config: ModelConfig) -> np.ndarray:
    return seq.targets if config.head_mode == "per-step" else seq.targets[-1:]


def batch_loss_and_grad(p: ModelParameters, batch, config: ModelConfig):
    """Mean L1 over every target element in ``batch`` and its gradient.

    Sequences may differ in length, so each is run on its own and the results
    are combined in list order with weights n_i / n_total.
    """
    counts = [_sequence_target(s, config).size for s in batch]
    total = float(sum(counts))
    loss = 0.0
    acc = None
    for seq, n in zip(batch, counts):
        li, gi = backward(seq.features, _sequence_target(seq, config), p, config)
        w = n / total
        loss += w * li
        gi = gi.named()
        if acc is None:
            acc = {k: w * v for k, v in gi.items()}
        else:
            for k, v in gi.items():
                acc[k] = acc[k] + w * v
    return loss, ModelParameters.from_named(acc)


def dataset_loss(p: ModelParameters, data, config: ModelConfig) -> float:
    """Element-weighted mean L1 over a whole dataset."""
    total = 0.0
    count = 0
    for seq in data:
        target = _sequence_target(seq, config)
        pred = forward(seq.features, p, config)[0]
        total += float(np.sum(np.abs(pred.reshape(target.shape) - target)))
        count += target.size
    return total / count


@dataclass
class TrainResult:
    params: ModelParameters
    loss_trace: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def _param_norms(p: ModelParameters) -> dict:
    return {k: float(np.linalg.norm(v)) for k, v in p.named().items()}


def train(config: ModelConfig, dataset: list[LabeledSequence], cfg: TrainConfig,
          params: ModelParameters | None = None) -> TrainResult:
    """Adam on the mean L1 loss.

    ``dataset`` must already be normalised. The visiting order of sequences
    is reshuffled each epoch from ``cfg.seed``. ``loss_trace[e]`` is the
    element-weighted mean of the batch losses seen during epoch ``e + 1``.
    """
    if not dataset:
        raise InsufficientDataError("training set is empty")
    p = init_parameters(config, cfg.seed) if params is None else params
    p.check(config)
    state = AdamState.zeros_like(p)
    rng = np.random.default_rng(cfg.seed)
    initial = dataset_loss(p, dataset, config)
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        weighted = 0.0
        seen = 0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            try:
                loss, grads = batch_loss_and_grad(p, batch, config)
            except DomainError:
                # diverged parameters can drive delta to 0 or NaN
                raise NumericalAbort(epoch, bi, _param_norms(p)) from None
            if not np.isfinite(loss):
                raise NumericalAbort(epoch, bi, _param_norms(p))
            n = sum(_sequence_target(s, config).size for s in batch)
            weighted += loss * n
            seen += n
            p, state = adam_step(p, grads, state, cfg)
        trace.append(weighted / seen)
        log.debug("epoch %d mean L1 %.6g", epoch, trace[-1])
    try:
        final = dataset_loss(p, dataset, config)
    except DomainError:
        raise NumericalAbort(cfg.epochs, -1, _param_norms(p)) from None
    if not np.isfinite(final):
        raise NumericalAbort(cfg.epochs, -1, _param_norms(p))
    return TrainResult(params=p, loss_trace=trace, initial_loss=initial, final_loss=final)


# ---------------------------------------------------------------------------
# metrics

def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise DimensionError(f"rmse: {pred.size} predictions vs {target.size} targets")
    if pred.size == 0:
        raise InsufficientDataError("rmse of an empty series")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def reporting_unit(task: str, label_unit: str) -> tuple[str, float]:
    """Reporting unit and conversion factor for labels of ``label_unit``."""
    try:
        units = TASK_UNITS[task]
    except KeyError:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASK_UNITS)}") from None
    if label_unit not in units:
        raise ConfigError(
            f"task {task!r} takes labels in {sorted(units)}, got {label_unit!r}"
        )
    return units[label_unit]


def predict_sequence(p: ModelParameters, config: ModelConfig, scalers: Scalers,
                     seq: LabeledSequence) -> np.ndarray:
    """Predictions in label units for one raw (unnormalised) sequence."""
    z = forward(scalers.features.transform(seq.features), p, config)[0]
    return scalers.targets.inverse_transform(np.atleast_1d(z)[:, None])[:, 0]


def evaluate(p: ModelParameters, config: ModelConfig, test: list[LabeledSequence],
             scalers: Scalers, task: str) -> tuple[float, str]:
    """RMSE over every test target, in cycles (RUL) or percent (SOH, SOC).

    Returns ``(rmse, unit)``.
    """
    if not test:
        raise InsufficientDataError("test set is empty")
    unit = None
    factor = 1.0
    preds, targets = [], []
    for seq in test:
        u, factor = reporting_unit(task, seq.unit)
        unit = u
        pred = predict_sequence(p, config, scalers, seq)
        target = _sequence_target(seq, config)
        preds.append(pred * factor)
        targets.append(target * factor)
    return rmse(np.concatenate(preds), np.concatenate(targets)), unit
