"""The regression network: affine embedding, selective SSM layer(s), affine
head down to one output per step."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError
from .numerics import as_dense, grad_check, linear, linear_backward
from .ssm import SsmParameters, init_ssm_parameters, layer_backward, layer_forward

HEAD_MODES = ("per-step", "last-step")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    d_model: int = 16
    d_state: int = 16
    n_layers: int = 1
    head_mode: str = "per-step"

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.d_model < 1 or self.d_state < 1 or self.n_layers < 1:
            raise ValueError("d_model, d_state and n_layers must be >= 1")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")

    def n_parameters(self) -> int:
        f, d, n = self.feature_dim, self.d_model, self.d_state
        return f * d + d + self.n_layers * (2 * d * n + d * d + d + d * n) + d + 1

    def tensor_shapes(self) -> dict[str, tuple]:
        f, d, n = self.feature_dim, self.d_model, self.d_state
        shapes = {"embed.w": (f, d), "embed.b": (d,)}
        for i in range(self.n_layers):
            shapes.update({
                f"ssm{i}.a_log": (d, n),
                f"ssm{i}.w_b": (d, n),
                f"ssm{i}.w_c": (d, n),
                f"ssm{i}.w_delta": (d, d),
                f"ssm{i}.bias_delta": (d,),
            })
        shapes["head.w"] = (d, 1)
        shapes["head.b"] = (1,)
        return shapes


@dataclass(frozen=True)
class ModelParameters:
    embed_w: np.ndarray
    embed_b: np.ndarray
    layers: tuple[SsmParameters, ...]
    head_w: np.ndarray
    head_b: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def named(self) -> dict[str, np.ndarray]:
        """Flat name -> tensor view, in checkpoint order."""
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        for i, layer in enumerate(self.layers):
            for name in SsmParameters.FIELDS:
                out[f"ssm{i}.{name}"] = getattr(layer, name)
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, np.ndarray]) -> "ModelParameters":
        n_layers = len({k.split(".")[0] for k in tensors if k.startswith("ssm")})
        layers = tuple(
            SsmParameters(**{name: as_dense(tensors[f"ssm{i}.{name}"]) for name in SsmParameters.FIELDS})
            for i in range(n_layers)
        )
        return cls(
            embed_w=as_dense(tensors["embed.w"]),
            embed_b=as_dense(tensors["embed.b"]),
            layers=layers,
            head_w=as_dense(tensors["head.w"]),
            head_b=as_dense(tensors["head.b"]),
        )

    def map(self, fn) -> "ModelParameters":
        return ModelParameters.from_named({k: fn(v) for k, v in self.named().items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.named().values())

    def check(self, config: ModelConfig) -> None:
        named = self.named()
        expected = config.tensor_shapes()
        if set(named) != set(expected):
            raise DimensionError(f"parameter names {sorted(named)} do not match config")
        for name, shape in expected.items():
            if named[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {named[name].shape}")


def init_parameters(config: ModelConfig, seed: int = 0) -> ModelParameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; zero biases on the
    embedding and head so zero input maps to ``head.b``."""
    rng = np.random.default_rng(seed)
    f, d = config.feature_dim, config.d_model
    kf = 1.0 / np.sqrt(f)
    embed_w = rng.uniform(-kf, kf, size=(f, d))
    layers = tuple(init_ssm_parameters(d, config.d_state, rng) for _ in range(config.n_layers))
    kd = 1.0 / np.sqrt(d)
    head_w = rng.uniform(-kd, kd, size=(d, 1))
    return ModelParameters(
        embed_w=embed_w, embed_b=np.zeros(d), layers=layers, head_w=head_w, head_b=np.zeros(1),
    )


def _as_batch(x, config: ModelConfig) -> np.ndarray:
    x = as_dense(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != config.feature_dim:
        raise DimensionError(f"expected input (B, L, {config.feature_dim}), got {x.shape}")
    return x


def _forward_cached(x, p: ModelParameters, parallel=False):
    u = linear(x, p.embed_w, p.embed_b)
    caches = []
    for layer in p.layers:
        u, cache = layer_forward(u, layer, parallel=parallel)
        caches.append(cache)
    out = linear(u, p.head_w, p.head_b)[..., 0]
    return out, (x, u, caches)


def forward(x, p: ModelParameters, config: ModelConfig, parallel: bool = False) -> np.ndarray:
    """Predictions of shape (B, L) in per-step mode or (B,) in last-step mode.

    A 2-D ``x`` of shape (L, F) is treated as a batch of one.
    """
    out, _ = _forward_cached(_as_batch(x, config), p, parallel)
    return out if config.head_mode == "per-step" else out[:, -1]


def l1_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: pred {pred.shape} vs target {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def l1_loss_grad(pred, target) -> np.ndarray:
    """Subgradient wrt ``pred``; zero at ties."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: pred {pred.shape} vs target {target.shape}")
    return np.sign(pred - target) / pred.size


def backward(x, target, p: ModelParameters, config: ModelConfig):
    """Loss and exact gradient of the mean L1 loss wrt every parameter.

    Returns ``(loss, grads)`` with ``grads`` a :class:`ModelParameters`.
    """
    x = _as_batch(x, config)
    out, (x, u_last, caches) = _forward_cached(x, p)
    pred = out if config.head_mode == "per-step" else out[:, -1]
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    loss = l1_loss(pred, target)
    dpred = l1_loss_grad(pred, target)

    dout = np.zeros_like(out)
    if config.head_mode == "per-step":
        dout[:] = dpred
    else:
        dout[:, -1] = dpred
    du, dhead_w, dhead_b = linear_backward(u_last, p.head_w, dout[..., None], with_bias=True)

    layer_grads = []
    for layer, cache in zip(reversed(p.layers), reversed(caches)):
        du, g = layer_backward(du, layer, cache)
        layer_grads.append(g)
    layer_grads.reverse()

    _, dembed_w, dembed_b = linear_backward(x, p.embed_w, du, with_bias=True)
    grads = ModelParameters(
        embed_w=dembed_w, embed_b=dembed_b, layers=tuple(layer_grads),
        head_w=dhead_w, head_b=dhead_b,
    )
    return loss, grads


def check_gradients(x, target, p: ModelParameters, config: ModelConfig, h: float = 1e-6) -> dict[str, float]:
    """Central-difference check of :func:`backward`, one entry per tensor."""
    names = list(p.named())
    _, grads = backward(x, target, p, config)
    analytic = grads.named()
    report = {}
    for name in names:
        def fun(theta, name=name):
            tensors = dict(p.named())
            tensors[name] = theta
            pred = forward(x, ModelParameters.from_named(tensors), config)
            return l1_loss(pred, np.reshape(target, pred.shape)), analytic[name]
        report[name] = grad_check(fun, p.named()[name], h)
    return report


def with_head(p: ModelParameters, head_w=None, head_b=None) -> ModelParameters:
    return replace(
        p,
        head_w=p.head_w if head_w is None else as_dense(head_w),
        head_b=p.head_b if head_b is None else as_dense(head_b),
    )
