"""Dense float64 primitives with paired backward rules, and a central-difference
gradient checker.

Arrays are plain ``numpy.ndarray`` of dtype float64; nothing here keeps a
graph. Each layer upstream writes its own backward using these pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import DimensionError, EvaluationError


def as_dense(a) -> np.ndarray:
    """Return ``a`` as a C-contiguous float64 array (no copy if already one)."""
    return np.ascontiguousarray(a, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    """Matrix product of 2-D arrays.

    Summation runs left to right over the inner index in both backends, so
    the result is bit-reproducible.
    """
    a = as_dense(a)
    b = as_dense(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return kernels.matmul_kernel(a, b)


def matmul_backward(a, b, dout) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of ``a @ b`` given ``dout``."""
    return matmul(dout, np.ascontiguousarray(b.T)), matmul(np.ascontiguousarray(a.T), dout)


def linear(x, w, bias=None) -> np.ndarray:
    """Apply ``x @ w (+ bias)`` over the last axis of an array of any rank."""
    x = as_dense(x)
    lead = x.shape[:-1]
    out = matmul(x.reshape(-1, x.shape[-1]), w)
    if bias is not None:
        out = out + bias
    return out.reshape(*lead, out.shape[-1])


def linear_backward(x, w, dout, with_bias=False):
    """Return ``(dx, dw)`` or ``(dx, dw, dbias)`` for :func:`linear`."""
    x2 = as_dense(x).reshape(-1, x.shape[-1])
    d2 = as_dense(dout).reshape(-1, dout.shape[-1])
    dx, dw = matmul_backward(x2, w, d2)
    dx = dx.reshape(x.shape)
    if with_bias:
        return dx, dw, d2.sum(axis=0)
    return dx, dw


def softplus(x) -> np.ndarray:
    """log(1 + exp(x)) in the overflow-safe form max(x, 0) + log1p(exp(-|x|))."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x) -> np.ndarray:
    """Derivative of softplus; evaluated without overflow for either sign."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus_backward(x, dout) -> np.ndarray:
    return dout * sigmoid(x)


@dataclass
class DualArray:
    """A value with an accumulated cotangent of the same shape."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = as_dense(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = as_dense(self.grad).copy()
            if self.grad.shape != self.value.shape:
                raise DimensionError(
                    f"grad shape {self.grad.shape} does not match value shape {self.value.shape}"
                )

    def accumulate(self, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise DimensionError(f"cannot accumulate {g.shape} into {self.value.shape}")
        self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def grad_check(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta,
    h: float = 1e-6,
) -> float:
    """Compare the analytic gradient of ``fun`` with central differences.

    ``fun(theta)`` must return ``(value, gradient)``. Returns the maximum
    over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    theta = as_dense(theta).copy()
    value, grad = fun(theta)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise EvaluationError("function or gradient is not finite at theta")
    if grad.shape != theta.shape:
        raise DimensionError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")

    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fun(theta)[0]
        flat[i] = orig - h
        fm = fun(theta)[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"function not finite within h={h} of coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
        worst = max(worst, err)
    return worst
