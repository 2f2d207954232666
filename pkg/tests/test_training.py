import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lithium_ssm.errors import ConfigError, DimensionError, InsufficientDataError, NumericalAbort
from lithium_ssm.model import ModelConfig, init_parameters, with_head
from lithium_ssm.training import (
    AdamState,
    LabeledSequence,
    Scalers,
    TrainConfig,
    adam_step,
    dataset_loss,
    evaluate,
    fit_scaler,
    fit_scalers,
    reporting_unit,
    rmse,
    train,
)

CFG = ModelConfig(feature_dim=2, d_model=4, d_state=3)


def toy_dataset(seed=0, n=4, length=12):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.normal(size=(length, 2))
        y = np.cumsum(x[:, 0]) * 0.1 + x[:, 1]
        out.append(LabeledSequence(x, y, name=f"s{i}"))
    return out


# ---------------------------------------------------------------------------
# scaler

def test_scaler_population_std():
    s = fit_scaler([1.0, 2.0, 3.0])
    assert s.mean[0] == 2.0
    assert s.std[0] == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    assert s.std[0] == pytest.approx(0.8165, abs=1e-4)


def test_scaler_constant_feature():
    rows = np.column_stack([np.full(5, 4.2), np.arange(5.0)])
    s = fit_scaler(rows)
    assert s.constant.tolist() == [True, False]
    z = s.transform(rows)
    assert not z[:, 0].any()
    np.testing.assert_allclose(s.inverse_transform(z)[:, 0], 4.2)


def test_scaler_empty():
    with pytest.raises(InsufficientDataError):
        fit_scaler(np.zeros((0, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)))
def test_scaler_moments_and_roundtrip(rows):
    s = fit_scaler(rows)
    z = s.transform(rows)
    assert np.all(s.std >= 0)
    assert np.abs(z.mean(axis=0)).max() < 1e-10
    live = ~s.constant
    np.testing.assert_allclose(z.var(axis=0)[live], 1.0, atol=1e-10)
    back = s.inverse_transform(z)
    np.testing.assert_allclose(back[:, live], rows[:, live], atol=1e-12 * max(1.0, np.abs(rows).max()))


def test_scalers_only_see_training_data():
    train_set = toy_dataset(0)
    test_set = [LabeledSequence(np.full((5, 2), 1e6), np.full(5, 1e6))]
    s1 = fit_scalers(train_set)
    s2 = fit_scalers(train_set)
    s1.apply(test_set[0])
    for a, b in zip(s1.named().values(), s2.named().values()):
        assert np.array_equal(a, b)
    back = Scalers.from_named(s1.named())
    for a, b in zip(back.named().values(), s1.named().values()):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Adam

def test_adam_first_step():
    p = init_parameters(CFG)
    g = p.map(np.ones_like)
    q, s = adam_step(p, g, AdamState.zeros_like(p), TrainConfig())
    step = q.head_b[0] - p.head_b[0]
    assert step == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
    assert s.t == 1


def test_adam_zero_gradient():
    p = init_parameters(CFG)
    q, _ = adam_step(p, p.map(np.zeros_like), AdamState.zeros_like(p), TrainConfig())
    for a, b in zip(p.named().values(), q.named().values()):
        assert np.array_equal(a, b)


def test_adam_sign_at_step_one(rng):
    p = init_parameters(CFG)
    g = p.map(lambda a: rng.normal(size=a.shape))
    q, s = adam_step(p, g, AdamState.zeros_like(p), TrainConfig())
    for name, a in p.named().items():
        delta = q.named()[name] - a
        assert np.array_equal(np.sign(delta), -np.sign(g.named()[name]))
        assert np.all(s.v[name] >= 0)


def test_adam_zero_lr_is_identity(rng):
    p = init_parameters(CFG)
    cfg = TrainConfig(learning_rate=0.0)
    s = AdamState.zeros_like(p)
    q = p
    for _ in range(5):
        q, s = adam_step(q, p.map(lambda a: rng.normal(size=a.shape)), s, cfg)
    for a, b in zip(p.named().values(), q.named().values()):
        assert np.array_equal(a, b)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(adam_beta1=1.0)


# ---------------------------------------------------------------------------
# training loop

def test_train_already_optimal():
    data = [LabeledSequence(np.zeros((6, 2)), np.zeros(6))]
    p0 = init_parameters(CFG)
    res = train(CFG, data, TrainConfig(epochs=3))
    assert res.loss_trace == [0.0, 0.0, 0.0]
    for a, b in zip(p0.named().values(), res.params.named().values()):
        assert np.array_equal(a, b)


def test_train_deterministic_and_improves():
    data = toy_dataset(1)
    cfg = TrainConfig(epochs=30, batch_size=2)
    a = train(CFG, data, cfg)
    b = train(CFG, data, cfg)
    assert a.loss_trace == b.loss_trace
    assert all(np.isfinite(a.loss_trace))
    assert int(np.argmin(a.loss_trace)) > 0
    assert a.final_loss < a.initial_loss
    assert a.final_loss == pytest.approx(dataset_loss(a.params, data, CFG))


def test_train_aborts_on_non_finite():
    data = [LabeledSequence(np.ones((3, 2)), np.array([0.0, np.inf, 0.0]))]
    with pytest.raises(NumericalAbort) as info:
        train(CFG, data, TrainConfig(epochs=2))
    assert info.value.epoch == 1 and "head.w" in info.value.param_norms


def test_train_empty():
    with pytest.raises(InsufficientDataError):
        train(CFG, [], TrainConfig())


# ---------------------------------------------------------------------------
# metrics

def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([1.0, 3.0], [2.0, 2.0]) == 1.0
    with pytest.raises(DimensionError):
        rmse([1.0], [1.0, 2.0])


@given(arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 8, elements=st.floats(-1e3, 1e3)),
       st.floats(-10, 10))
def test_rmse_symmetry_and_homogeneity(a, b, c):
    assert rmse(a, b) == rmse(b, a)
    assert rmse(c * a, c * b) == pytest.approx(abs(c) * rmse(a, b), rel=1e-12, abs=1e-9)


def test_reporting_units():
    assert reporting_unit("rul", "cycle") == ("cycle", 1.0)
    assert reporting_unit("soh", "fraction") == ("percent", 100.0)
    assert reporting_unit("soc", "percent") == ("percent", 1.0)
    with pytest.raises(ConfigError):
        reporting_unit("rul", "fraction")
    with pytest.raises(ConfigError):
        reporting_unit("cap", "fraction")


def _mean_predictor(data):
    scalers = fit_scalers(data)
    # zero head output in z-space is the training target mean in label space
    p = with_head(init_parameters(CFG), head_w=np.zeros((4, 1)), head_b=[0.0])
    return p, scalers


def test_evaluate_constant_predictor_is_std():
    data = toy_dataset(2)
    p, scalers = _mean_predictor(data)
    targets = np.concatenate([s.targets for s in data])
    value, unit = evaluate(p, CFG, data, scalers, "soc")
    assert unit == "percent"
    assert value == pytest.approx(100 * targets.std(), rel=1e-12)


def test_evaluate_exact_model_and_unit_conversion():
    data = [LabeledSequence(np.random.default_rng(0).normal(size=(5, 2)), np.full(5, 0.9))]
    p, scalers = _mean_predictor(data)
    assert evaluate(p, CFG, data, scalers, "soh") == (0.0, "percent")
    shifted = [LabeledSequence(s.features, s.targets + 0.01) for s in data]
    frac = rmse(np.full(5, 0.9), shifted[0].targets)
    value, _ = evaluate(p, CFG, shifted, scalers, "soh")
    assert value == pytest.approx(100 * frac, rel=1e-12)


def test_evaluate_unit_mismatch():
    data = [LabeledSequence(np.zeros((3, 2)), np.zeros(3), unit="fraction")]
    p, scalers = _mean_predictor(data)
    with pytest.raises(ConfigError):
        evaluate(p, CFG, data, scalers, "rul")
