import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lithium_ssm import kernels
from lithium_ssm.errors import DimensionError, EvaluationError
from lithium_ssm.numerics import (
    DualArray,
    grad_check,
    linear,
    linear_backward,
    matmul,
    sigmoid,
    softplus,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_matmul_identity(rng):
    m = rng.normal(size=(2, 2))
    assert np.array_equal(matmul(np.eye(2), m), m)


def test_matmul_hand_case():
    out = matmul([[1, 2], [3, 4]], [[1], [1]])
    assert out.tolist() == [[3.0], [7.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_backends_agree_bitwise(rng):
    a = rng.normal(size=(7, 5))
    b = rng.normal(size=(5, 3))
    # both accumulate left to right over the inner index
    assert np.array_equal(kernels.matmul_nb(a, b), kernels.matmul_np(a, b))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_matmul_associative(m, k, n, p, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(m, k)), r.normal(size=(k, n)), r.normal(size=(n, p))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    scale = max(1.0, np.abs(left).max())
    assert np.abs(left - right).max() / scale < 1e-10


def test_softplus_reference_points():
    assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert abs(softplus(50.0) - (50.0 + math.log1p(math.exp(-50.0)))) < 1e-12
    tiny = softplus(-50.0)
    assert tiny > 0 and np.isfinite(tiny)
    assert tiny == pytest.approx(math.log1p(math.exp(-50.0)), rel=1e-12)
    assert tiny == pytest.approx(1.93e-22, rel=1e-2)


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_softplus_bounds(x):
    y = softplus(x)
    # below about -745 the true value underflows float64
    assert np.all(y[x > -700] > 0)
    assert np.all(y >= 0)
    gap = y - np.maximum(x, 0)
    assert np.all(gap >= 0)
    assert np.all(gap <= math.log(2) + 1e-15)


def test_softplus_positive_on_moderate_negatives():
    x = np.linspace(-700, 0, 101)
    assert np.all(softplus(x) > 0)


def test_sigmoid_no_overflow():
    x = np.array([-1000.0, -20.0, 0.0, 20.0, 1000.0])
    s = sigmoid(x)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5


def test_grad_check_quadratic():
    # power-of-two step: 3 +/- h and both squares are exact, so only the
    # (zero) truncation error of central differences remains
    err = grad_check(lambda t: (float(t[0] ** 2), 2 * t), np.array([3.0]), h=2.0**-10)
    assert err < 1e-10


def test_grad_check_l1_of_constant_model():
    target = np.array([0.3, -1.2, 2.0])

    def fun(theta):
        r = theta[0] - target
        return float(np.mean(np.abs(r))), np.array([np.mean(np.sign(r))])

    assert grad_check(fun, np.array([0.71])) < 1e-6


def test_grad_check_reports_wrong_gradient():
    err = grad_check(lambda t: (float(t[0] ** 2), 3 * t), np.array([3.0]))
    assert err == pytest.approx(1 / 3, rel=1e-6)


def test_grad_check_non_finite():
    with pytest.raises(EvaluationError):
        grad_check(lambda t: (float("inf"), t), np.array([1.0]))


@pytest.mark.parametrize("shape", [(4, 3), (2, 5, 3)])
def test_linear_backward_matches_finite_differences(rng, shape):
    x = rng.normal(size=shape)
    w = rng.normal(size=(3, 2))
    bias = rng.normal(size=2)
    dout = rng.normal(size=shape[:-1] + (2,))
    dx, dw, db = linear_backward(x, w, dout, with_bias=True)

    assert grad_check(lambda t: (float(np.sum(linear(t, w, bias) * dout)), dx), x) < 1e-7
    assert grad_check(lambda t: (float(np.sum(linear(x, t, bias) * dout)), dw), w) < 1e-7
    assert grad_check(lambda t: (float(np.sum(linear(x, w, t) * dout)), db), bias) < 1e-7


def test_softplus_backward_matches_finite_differences(rng):
    x = rng.normal(size=6) * 3
    dout = rng.normal(size=6)
    assert grad_check(lambda t: (float(np.sum(softplus(t) * dout)), dout * sigmoid(x)), x) < 1e-7


def test_dual_array_accumulates_additively():
    d = DualArray(np.zeros((2, 2)))
    d.accumulate(np.ones((2, 2)))
    d.accumulate(2 * np.ones((2, 2)))
    assert np.array_equal(d.grad, 3 * np.ones((2, 2)))
    with pytest.raises(DimensionError):
        d.accumulate(np.ones(3))
    d.zero_grad()
    assert not d.grad.any()
