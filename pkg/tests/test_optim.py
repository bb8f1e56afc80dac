import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from symphony import optim


def one_param(value=1.0, **kw):
    params = {"w": np.array([value])}
    return params, optim.init_state(params, **kw)


def test_defaults():
    s = optim.OptimState()
    assert s.beta1 == pytest.approx(0.6180339887498949, abs=1e-16)
    assert s.beta2 == 0.995 and s.weight_decay == 0.01 and s.lr == 1e-4
    assert not s.sqrt_divisor


def test_single_step_unit_gradient():
    params, state = one_param(1.0)
    assert optim.step(params, {"w": np.array([1.0])}, state)
    b1 = (math.sqrt(5) - 1) / 2
    m = 1 - b1
    v = 1 - 0.995
    expected = 1.0 - 1e-4 * (m / (v + 1e-8) + 0.01 * 1.0)
    assert abs(params["w"][0] - expected) <= 1e-12
    assert abs(state.m["w"][0] - m) <= 1e-15
    assert abs(state.v["w"][0] - v) <= 1e-15


def test_single_step_sqrt_divisor():
    params, state = one_param(1.0, sqrt_divisor=True)
    optim.step(params, {"w": np.array([1.0])}, state)
    m, v = 1 - optim.GOLDEN, 0.005
    assert params["w"][0] == pytest.approx(1.0 - 1e-4 * (m / (math.sqrt(v) + 1e-8) + 0.01), abs=1e-12)


@given(st.floats(-1e3, 1e3, allow_nan=False), st.integers(1, 20))
def test_pure_decay_exact(theta, k):
    params, state = one_param(theta)
    expected = theta
    for _ in range(k):
        optim.step(params, {"w": np.zeros(1)}, state)
        expected = expected - 1e-4 * (0.0 / (0.0 + 1e-8) + 0.01 * expected)
    assert params["w"][0] == expected


def test_pure_decay_factor():
    params, state = one_param(2.0)
    optim.step(params, {"w": np.zeros(1)}, state)
    assert params["w"][0] == 2.0 - 1e-4 * (0.01 * 2.0)


def test_second_moment_nonnegative():
    params = {"w": np.zeros(10)}
    state = optim.init_state(params)
    rng = np.random.default_rng(0)
    for _ in range(50):
        optim.step(params, {"w": rng.normal(size=10)}, state)
        assert np.all(state.v["w"] >= 0)


def test_non_finite_gradient_rejected_untouched():
    params = {"a": np.ones(3), "b": np.ones(2)}
    state = optim.init_state(params)
    assert not optim.step(params, {"a": np.ones(3), "b": np.array([1.0, np.inf])}, state)
    assert state.rejected == 1 and state.steps == 0
    assert np.all(params["a"] == 1.0) and np.all(state.m["a"] == 0.0)


def test_shape_mismatch():
    params, state = one_param()
    with pytest.raises(ValueError):
        optim.step(params, {"w": np.zeros(2)}, state)


def test_minimizes_quadratic():
    params = {"w": np.array([3.0, -2.0])}
    state = optim.init_state(params, lr=1e-3, sqrt_divisor=True, weight_decay=0.0)
    for _ in range(5000):
        optim.step(params, {"w": 2 * params["w"]}, state)
    assert np.all(np.abs(params["w"]) < 0.05)
