import math

import numpy as np
import pytest

from mimforge.optim import (
    AdamState,
    LrSchedule,
    NonFiniteGradient,
    adam_step,
    clip_global_norm,
    cosine_lr,
    layer_lr_multipliers,
)
from mimforge.tensor import Tensor


def test_adam_first_step_analytic():
    # t=1: m_hat = g, v_hat = g^2, so the update is ~ -lr * sign(g)
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.array([0.5])], state, lr=1e-3)
    delta = p.data[0] - 1.0
    assert abs(delta - (-1e-3 * 0.5 / (0.5 + 1e-8))) < 1e-9
    assert state.t == 1


def test_adam_zero_grad_identity():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(2, dtype=np.float32)], state, lr=1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_pure_weight_decay():
    p = Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(1)], state, lr=1e-3, weight_decay=0.05)
    np.testing.assert_allclose(p.data, [0.99995], rtol=1e-12)


def test_adam_rejects_non_finite():
    p = Tensor(np.ones(2), requires_grad=True)
    state = AdamState.for_params([p])
    before = p.data.copy()
    with pytest.raises(NonFiniteGradient):
        adam_step([p], [np.array([1.0, np.nan])], state, lr=1e-3)
    np.testing.assert_array_equal(p.data, before)
    assert state.t == 0


def test_adam_lr_scales():
    p0 = Tensor(np.array([0.0]), requires_grad=True)
    p1 = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState.for_params([p0, p1])
    adam_step([p0, p1], [np.ones(1), np.ones(1)], state, lr=1e-2, lr_scales=[1.0, 0.5])
    assert abs(p1.data[0]) < abs(p0.data[0])
    np.testing.assert_allclose(p1.data[0] / p0.data[0], 0.5, rtol=1e-6)


def test_cosine_lr_endpoints_and_midpoint():
    sched = LrSchedule(peak_lr=1.5e-3, min_lr=1e-5, warmup_steps=100, total_steps=1000)
    assert cosine_lr(100, sched) == pytest.approx(1.5e-3)
    assert cosine_lr(1000, sched) == pytest.approx(1e-5)
    assert cosine_lr(550, sched) == pytest.approx((1.5e-3 + 1e-5) / 2)  # cosine midpoint
    assert cosine_lr(0, sched) == 0.0
    assert cosine_lr(5000, sched) == pytest.approx(1e-5)


def test_cosine_lr_continuous_and_monotone_after_warmup():
    sched = LrSchedule(peak_lr=1e-3, min_lr=1e-5, warmup_steps=50, total_steps=500)
    just_before = cosine_lr(50, sched)
    just_after = cosine_lr(51, sched)
    assert abs(just_before - 1e-3) < 1e-12
    assert just_after <= just_before
    values = [cosine_lr(s, sched) for s in range(50, 501)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_lr_warmup_is_linear():
    sched = LrSchedule(peak_lr=2e-3, min_lr=1e-5, warmup_steps=10, total_steps=100)
    for s in range(11):
        assert cosine_lr(s, sched) == pytest.approx(2e-3 * s / 10)


def test_lr_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(peak_lr=1e-3, min_lr=2e-3, warmup_steps=1, total_steps=10)
    with pytest.raises(ValueError):
        LrSchedule(peak_lr=1e-3, min_lr=1e-5, warmup_steps=10, total_steps=10)


def test_layer_multipliers_no_decay():
    assert layer_lr_multipliers(4, 1.0) == [1.0] * 6


def test_layer_multipliers_power_oracle():
    mults = layer_lr_multipliers(12, 0.65)
    assert mults[-1] == pytest.approx(1.0)  # head / final norm
    assert mults[12] == pytest.approx(0.65)  # top block
    assert mults[0] == pytest.approx(0.65**13)  # embeddings, ~3.70e-3
    assert abs(mults[0] - 3.70e-3) < 5e-5


def test_layer_multipliers_single_block():
    assert layer_lr_multipliers(1, 0.5) == pytest.approx([0.25, 0.5, 1.0])


def test_layer_multipliers_monotone():
    mults = layer_lr_multipliers(7, 0.8)
    assert all(a <= b for a, b in zip(mults, mults[1:]))


def test_clip_noop_below_threshold():
    g = [np.array([1.0, 0.0])]
    out = clip_global_norm(g, 3.0)
    np.testing.assert_array_equal(out[0], [1.0, 0.0])


def test_clip_norm_arithmetic():
    out = clip_global_norm([np.array([6.0, 8.0])], 3.0)
    np.testing.assert_allclose(out[0], [1.8, 2.4], rtol=1e-12)


def test_clip_zero_grads_unchanged():
    out = clip_global_norm([np.zeros(3), np.zeros((2, 2))], 1.0)
    assert all(np.all(g == 0) for g in out)


def test_clip_global_across_tensors():
    g = [np.array([3.0]), np.array([4.0])]  # global norm 5
    out = clip_global_norm(g, 1.0)
    total = math.sqrt(sum(float((x**2).sum()) for x in out))
    assert total == pytest.approx(1.0)
