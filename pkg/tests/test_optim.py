from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from buildcast.optim import OptimizerState, adamw_step, warmup_lr


def reference_adamw(p, grads, lr, b1, b2, eps, wd):
    """Scalar loop version of AdamW for comparison."""
    p = float(p)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return p


def test_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -1.0])}
    adamw_step(p, {"w": np.array([0.3, -5.0])}, OptimizerState(lr=0.1, weight_decay=0.0))
    assert np.allclose(p["w"], [0.9, -0.9], atol=1e-7)


def test_decay_is_decoupled_from_gradient():
    p = {"w": np.array([2.0])}
    adamw_step(p, {"w": np.array([0.0])}, OptimizerState(lr=0.1, weight_decay=0.5))
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_zero_lr_leaves_parameters_untouched():
    p = {"w": np.array([1.5, 2.5])}
    st_ = OptimizerState(lr=0.0)
    for _ in range(3):
        adamw_step(p, {"w": np.array([1.0, -1.0])}, st_)
    assert p["w"].tolist() == [1.5, 2.5] and st_.step == 3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(1e-4, 0.5), st.floats(0.0, 0.1))
def test_matches_scalar_reference(grads, lr, wd):
    p = {"w": np.array([0.7])}
    state = OptimizerState(lr=lr, weight_decay=wd)
    for g in grads:
        adamw_step(p, {"w": np.array([g])}, state)
    assert p["w"][0] == pytest.approx(reference_adamw(0.7, grads, lr, 0.9, 0.999, 1e-8, wd), rel=1e-12, abs=1e-12)


def test_only_named_parameters_change():
    p = {"a": np.ones(2), "b": np.ones(2)}
    adamw_step(p, {"a": np.ones(2)}, OptimizerState())
    assert p["b"].tolist() == [1.0, 1.0] and p["a"][0] < 1.0


def test_rejects_non_finite_and_mismatched_gradients():
    p = {"w": np.ones(2)}
    with pytest.raises(FloatingPointError, match="'w'"):
        adamw_step(p, {"w": np.array([np.nan, 0.0])}, OptimizerState())
    with pytest.raises(ValueError):
        adamw_step(p, {"w": np.ones(3)}, OptimizerState())
    assert p["w"].tolist() == [1.0, 1.0]


@pytest.mark.parametrize("bad", [{"lr": -1.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"weight_decay": -1.0}])
def test_state_validation(bad):
    with pytest.raises(ValueError):
        OptimizerState(**bad)


def test_warmup_schedule():
    lrs = [warmup_lr(1.0, s, 100) for s in range(7)]
    assert lrs == [0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0]
    assert warmup_lr(1.0, 0, 10) == 1.0  # 5% of 10 rounds to zero warmup steps
    assert warmup_lr(0.5, 3, 100, warmup_frac=0.0) == 0.5


def test_decay_factor_with_zero_gradient():
    p = {"w": np.array([1.0, -3.0])}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(lr=0.1, weight_decay=0.01))
    assert np.allclose(p["w"], [0.999, -2.997], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-6), min_size=1, max_size=6))
def test_first_step_magnitude_bounded_without_second_moment_memory(grads):
    g = np.array(grads)
    p = {"w": np.zeros_like(g)}
    adamw_step(p, {"w": g}, OptimizerState(lr=0.01, beta2=0.0, weight_decay=0.0))
    assert np.all(np.abs(p["w"]) <= 0.01 * (1 + 1e-8))
    assert np.all(np.sign(p["w"]) == -np.sign(g))
