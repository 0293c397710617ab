import math

import numpy as np
import pytest

from features.optim import AdamWConfig, AdamWState, Schedule, adamw_step, anneal_fraction, cosine_lr, global_grad_norm
from util.errors import NonFiniteError, ShapeError, ValidationError


@pytest.fixture
def schedule():
    return Schedule(total_steps=1000)


def test_schedule_endpoints(schedule):
    assert cosine_lr(0, schedule, "head") == 1.0e-3
    assert cosine_lr(0, schedule, "backbone") == 1.0e-4
    assert cosine_lr(1000, schedule, "head") == 1.0e-6
    assert cosine_lr(1000, schedule, "backbone") == 1.0e-6


def test_schedule_midpoint(schedule):
    assert cosine_lr(500, schedule, "backbone") == pytest.approx(5.05e-5, rel=1e-12)


def test_backbone_is_a_tenth_of_head_at_start(schedule):
    assert cosine_lr(0, schedule, "backbone") / cosine_lr(0, schedule, "head") == pytest.approx(0.1)


def test_schedule_is_non_increasing(schedule):
    for group in ("backbone", "head"):
        rates = [cosine_lr(t, schedule, group) for t in range(1001)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))
        assert min(rates) >= schedule.lr_min


def test_schedule_rejects_steps_past_the_end(schedule):
    with pytest.raises(ValidationError):
        cosine_lr(1001, schedule, "head")
    with pytest.raises(ValidationError):
        anneal_fraction(-1, 10)
    with pytest.raises(ValidationError):
        cosine_lr(0, schedule, "neck")


def test_schedule_validation():
    with pytest.raises(ValidationError):
        Schedule(total_steps=0)
    with pytest.raises(ValidationError):
        Schedule(total_steps=10, lr_min=1e-3)


def test_zero_gradient_without_decay_changes_nothing(rng):
    p = rng.normal(size=(3, 4))
    before = p.copy()
    params, state = adamw_step({"w": p}, {"w": np.zeros_like(p)}, AdamWState(), 0.01, AdamWConfig(weight_decay=0.0))
    assert np.array_equal(params["w"], before)
    assert state.step == 1


def test_zero_gradient_applies_only_decay(rng):
    p = rng.normal(size=5)
    before = p.copy()
    adamw_step({"w": p}, {"w": np.zeros(5)}, AdamWState(), 0.01, AdamWConfig(weight_decay=0.1))
    assert p == pytest.approx(before * (1 - 0.001), rel=1e-15)


def test_scalar_matches_hand_rolled_adamw():
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    p = np.array([1.0])
    state = AdamWState()
    ref, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        adamw_step({"x": p}, {"x": np.array([1.0])}, state, lr, AdamWConfig(b1, b2, eps, wd))
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        ref -= lr * wd * ref
        ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert p[0] == pytest.approx(ref, rel=1e-12)


def test_per_parameter_rates():
    params = {"a": np.array([1.0]), "b": np.array([1.0])}
    grads = {"a": np.array([1.0]), "b": np.array([1.0])}
    adamw_step(params, grads, AdamWState(), {"a": 0.0, "b": 0.1}, AdamWConfig(weight_decay=0.0))
    assert params["a"][0] == 1.0
    assert params["b"][0] == pytest.approx(0.9, rel=1e-6)


def test_non_finite_gradient_aborts_before_any_update():
    params = {"a": np.array([1.0, 2.0]), "b": np.array([3.0])}
    state = AdamWState()
    with pytest.raises(NonFiniteError) as e:
        adamw_step(params, {"a": np.array([0.1, 0.2]), "b": np.array([np.nan])}, state, 0.1)
    assert e.value.details["param"] == "b"
    assert params["a"].tolist() == [1.0, 2.0]
    assert state.step == 0


def test_gradient_shape_must_match():
    with pytest.raises(ShapeError):
        adamw_step({"a": np.zeros(3)}, {"a": np.zeros(2)}, AdamWState(), 0.1)


def test_global_grad_norm():
    assert global_grad_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == 5.0
