"""Selective state space layer.

A layer maps ``x`` of shape (B, L, D) to ``y`` of the same shape:

    B_t = x_t @ w_b,  C_t = x_t @ w_c,  delta_t = softplus(x_t @ w_delta + bias_delta)
    abar = exp(delta * A),  bbar = phi(delta * A) * delta * B_t,   A = -exp(a_log)
    h_t = abar_t * h_{t-1} + bbar_t * x_t,   y_t = sum_n C_t[n] h_t[n]

with ``phi(z) = (exp(z) - 1) / z``. ``A`` is diagonal and stored as (D, N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, DomainError
from .numerics import as_dense, linear, linear_backward, sigmoid, softplus

PHI_SERIES_CUTOFF = 1e-5
# phi' switches to its series much earlier: the closed form loses ~eps/z^2.
DPHI_SERIES_CUTOFF = 1e-3


@dataclass(frozen=True)
class SsmConfig:
    d_model: int
    d_state: int = 16
    seq_len: int = 1
    batch: int = 1

    def __post_init__(self):
        for name in ("d_model", "d_state", "seq_len", "batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class SsmParameters:
    a_log: np.ndarray       # (D, N)
    w_b: np.ndarray         # (D, N)
    w_c: np.ndarray         # (D, N)
    w_delta: np.ndarray     # (D, D)
    bias_delta: np.ndarray  # (D,)

    FIELDS = ("a_log", "w_b", "w_c", "w_delta", "bias_delta")

    @property
    def d_model(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)

    def shapes(self) -> dict:
        d, n = self.a_log.shape
        return {"a_log": (d, n), "w_b": (d, n), "w_c": (d, n),
                "w_delta": (d, d), "bias_delta": (d,)}

    def validate(self) -> None:
        for name, shape in self.shapes().items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"SsmParameters.{name}: expected {shape}, got {got}")


@dataclass(frozen=True)
class SelectiveCoefficients:
    b_seq: np.ndarray      # (B, L, N)
    c_seq: np.ndarray      # (B, L, N)
    delta_seq: np.ndarray  # (B, L, D), > 0


def init_ssm_parameters(d_model: int, d_state: int = 16, rng=None) -> SsmParameters:
    """A(d, n) = -(n + 1); projections uniform in [-1/sqrt(D), 1/sqrt(D)]."""
    rng = np.random.default_rng(0) if rng is None else rng
    k = 1.0 / np.sqrt(d_model)
    a_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_model, 1))
    return SsmParameters(
        a_log=a_log,
        w_b=rng.uniform(-k, k, size=(d_model, d_state)),
        w_c=rng.uniform(-k, k, size=(d_model, d_state)),
        w_delta=rng.uniform(-k, k, size=(d_model, d_model)),
        bias_delta=rng.uniform(-k, k, size=d_model),
    )


def _check_input(x: np.ndarray, p: SsmParameters) -> np.ndarray:
    x = as_dense(x)
    if x.ndim != 3 or x.shape[2] != p.d_model:
        raise DimensionError(f"expected input (B, L, {p.d_model}), got {x.shape}")
    return x


def project_inputs(x, p: SsmParameters) -> SelectiveCoefficients:
    x = _check_input(x, p)
    return SelectiveCoefficients(
        b_seq=linear(x, p.w_b),
        c_seq=linear(x, p.w_c),
        delta_seq=softplus(linear(x, p.w_delta, p.bias_delta)),
    )


# ---------------------------------------------------------------------------
# discretization

def phi(z) -> np.ndarray:
    """(exp(z) - 1) / z, with the value 1 at z = 0."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < PHI_SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(safe) / safe)


def dphi(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < DPHI_SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
    return np.where(small, series, exact)


def discretize(a_log, b, delta) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for a diagonal system.

    Broadcasts: ``b`` has trailing axis N, ``delta`` trailing axis D, and the
    outputs have trailing axes (D, N). With ``b`` of shape (N,) and ``delta``
    of shape (D,) this is the single-timestep form; with (B, L, N) and
    (B, L, D) it discretizes a whole sequence at once.
    """
    a_log = as_dense(a_log)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(delta > 0):
        raise DomainError("discretize: sample time delta must be strictly positive")
    if delta.shape[-1] != a_log.shape[0] or b.shape[-1] != a_log.shape[1]:
        raise DimensionError(
            f"discretize: a_log {a_log.shape}, b {b.shape}, delta {delta.shape} are inconsistent"
        )
    A = -np.exp(a_log)
    dt = delta[..., :, None]
    z = dt * A
    abar = np.exp(z)
    bbar = phi(z) * dt * b[..., None, :]
    return abar, bbar


def discretize_backward(a_log, b, delta, dabar, dbbar):
    """Cotangents ``(da_log, db, ddelta)`` of :func:`discretize` (sequence form)."""
    A = -np.exp(a_log)
    dt = delta[..., :, None]
    z = dt * A
    bexp = b[..., None, :]
    ph = phi(z)
    dz = dabar * np.exp(z) + dbbar * dphi(z) * dt * bexp
    ddelta = (dz * A).sum(axis=-1) + (dbbar * ph * bexp).sum(axis=-1)
    db = (dbbar * ph * dt).sum(axis=-2)
    lead = tuple(range(z.ndim - 2))
    dA = (dz * dt).sum(axis=lead) if lead else dz * dt
    return dA * A, db, ddelta


# ---------------------------------------------------------------------------
# scan

def _check_scan_shapes(abar, bbar, c, x):
    abar, bbar, c, x = (as_dense(v) for v in (abar, bbar, c, x))
    if abar.ndim != 4 or bbar.shape != abar.shape:
        raise DimensionError(f"abar {abar.shape} and bbar {bbar.shape} must match as (B, L, D, N)")
    nb, nl, nd, nn = abar.shape
    if c.shape != (nb, nl, nn):
        raise DimensionError(f"c must be {(nb, nl, nn)}, got {c.shape}")
    if x.shape != (nb, nl, nd):
        raise DimensionError(f"x must be {(nb, nl, nd)}, got {x.shape}")
    return abar, bbar, c, x


def selective_scan(abar, bbar, c, x) -> np.ndarray:
    """Sequential evaluation of the recurrence with h_0 = 0; returns (B, L, D)."""
    return kernels.scan_kernel(*_check_scan_shapes(abar, bbar, c, x))


def selective_scan_parallel(abar, bbar, c, x) -> np.ndarray:
    """Same contract as :func:`selective_scan`, evaluated as a prefix tree over
    the associative pair operator."""
    return kernels.prefix_scan_kernel(*_check_scan_shapes(abar, bbar, c, x))


def scan_backward(abar, bbar, c, x, dy):
    """Cotangents ``(dabar, dbbar, dc, dx)`` of :func:`selective_scan`."""
    abar, bbar, c, x = _check_scan_shapes(abar, bbar, c, x)
    dy = as_dense(dy)
    if dy.shape != x.shape:
        raise DimensionError(f"dy must be {x.shape}, got {dy.shape}")
    return kernels.scan_backward_kernel(abar, bbar, c, x, dy)


# ---------------------------------------------------------------------------
# whole layer

def layer_forward(x, p: SsmParameters, parallel: bool = False):
    """Run one layer; returns ``(y, cache)`` where cache feeds :func:`layer_backward`."""
    x = _check_input(x, p)
    pre_delta = linear(x, p.w_delta, p.bias_delta)
    coeffs = SelectiveCoefficients(
        b_seq=linear(x, p.w_b),
        c_seq=linear(x, p.w_c),
        delta_seq=softplus(pre_delta),
    )
    abar, bbar = discretize(p.a_log, coeffs.b_seq, coeffs.delta_seq)
    scan = selective_scan_parallel if parallel else selective_scan
    y = scan(abar, bbar, coeffs.c_seq, x)
    return y, (x, pre_delta, coeffs, abar, bbar)


def layer_backward(dy, p: SsmParameters, cache):
    """Return ``(dx, grads)`` with ``grads`` an :class:`SsmParameters` of cotangents."""
    x, pre_delta, coeffs, abar, bbar = cache
    dabar, dbbar, dc, dx = scan_backward(abar, bbar, coeffs.c_seq, x, dy)
    da_log, db_seq, ddelta = discretize_backward(p.a_log, coeffs.b_seq, coeffs.delta_seq,
                                                 dabar, dbbar)
    dpre = ddelta * sigmoid(pre_delta)

    dx_d, dw_delta, dbias = linear_backward(x, p.w_delta, dpre, with_bias=True)
    dx_b, dw_b = linear_backward(x, p.w_b, db_seq)
    dx_c, dw_c = linear_backward(x, p.w_c, dc)
    dx = dx + dx_d + dx_b + dx_c
    grads = SsmParameters(a_log=da_log, w_b=dw_b, w_c=dw_c, w_delta=dw_delta, bias_delta=dbias)
    return dx, grads
