import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from laghash.errors import ContractError, NonFiniteGradient
from laghash.hashfield import FieldConfig, ParameterStore, init_params
from laghash.optim import TrainState, adam_step, level_sigmas, sigma_schedule


def scalar_store(v=1.0):
    return ParameterStore(np.array([v], dtype=np.float64), {"mlp_weights/0": (0, (1,))})


def adam_reference(theta, grad_fn, steps, lr, b1=0.9, b2=0.99, eps=1e-15):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(theta)
    return trace


def test_zero_grads_leave_params_unchanged():
    p = init_params(FieldConfig(levels=2, lagrangian_levels=1, table_size=64), 0)
    before = p.values.copy()
    st_ = TrainState.for_params(p)
    adam_step(st_, p, np.zeros_like(p.values))
    np.testing.assert_array_equal(p.values, before)
    assert st_.step == 1


def test_first_step_moves_by_lr():
    for g in (3.7, -0.02):
        p = scalar_store(0.5)
        s = TrainState.for_params(p, lr=0.05)
        adam_step(s, p, np.array([g]))
        assert p.values[0] == pytest.approx(0.5 - 0.05 * math.copysign(1, g), rel=1e-12)


def test_three_steps_match_reference_trace():
    p = scalar_store(1.0)
    s = TrainState.for_params(p, lr=0.1)
    ours = []
    for _ in range(3):
        adam_step(s, p, 2 * p.values.copy())
        ours.append(p.values[0])
    ref = adam_reference(1.0, lambda th: 2 * th, 3, 0.1)
    np.testing.assert_allclose(ours, ref, rtol=1e-14)


def test_gaussian_means_use_their_own_rate():
    cfg = FieldConfig(levels=2, lagrangian_levels=1, base_res=2, max_res=4, table_size=16)
    p = init_params(cfg, 0, np.float64)
    before = p.values.copy()
    s = TrainState.for_params(p, lr=1e-2, lr_gaussian=1e-3)
    adam_step(s, p, np.ones_like(p.values))
    delta = before - p.values
    np.testing.assert_allclose(p.view("gaussian_means/1", delta), 1e-3, rtol=1e-9)
    np.testing.assert_allclose(p.view("gaussian_feats/1", delta), 1e-2, rtol=1e-9)
    np.testing.assert_allclose(p.view("mlp_weights/0", delta), 1e-2, rtol=1e-9)


def test_nan_gradient_names_the_slice():
    cfg = FieldConfig(levels=2, lagrangian_levels=1, base_res=2, max_res=4, table_size=16)
    p = init_params(cfg, 0)
    g = np.zeros_like(p.values)
    g[p.span("gaussian_feats/1")][3] = np.nan
    with pytest.raises(NonFiniteGradient) as exc:
        adam_step(TrainState.for_params(p), p, g)
    assert exc.value.slice_name == "gaussian_feats/1"


def test_misaligned_gradient():
    p = scalar_store()
    with pytest.raises(ContractError):
        adam_step(TrainState.for_params(p), p, np.zeros(2))


def test_zero_lr_is_identity(rng):
    cfg = FieldConfig(levels=2, lagrangian_levels=1, base_res=2, max_res=4, table_size=16)
    p = init_params(cfg, 0)
    before = p.values.copy()
    s = TrainState.for_params(p, lr=0.0, lr_gaussian=0.0)
    for _ in range(3):
        adam_step(s, p, rng.normal(size=len(p)).astype(np.float32))
    np.testing.assert_array_equal(p.values, before)


def test_slices_update_independently(rng):
    # each slice's trajectory depends only on its own gradients, so the
    # order in which slices are considered cannot matter
    cfg = FieldConfig(levels=2, lagrangian_levels=1, base_res=2, max_res=4, table_size=16)
    p0 = init_params(cfg, 0, np.float64)
    a = p0.span("eulerian/0")
    grads = [rng.normal(size=len(p0)) for _ in range(4)]

    def run(other_scale):
        p = init_params(cfg, 0, np.float64)
        s = TrainState.for_params(p)
        for g in grads:
            g = g * other_scale
            g[a] = 0.0
            g[a] += grads[0][a]
            adam_step(s, p, g)
        return p.values

    np.testing.assert_array_equal(run(1.0)[a], run(-7.0)[a])


# -- sigma schedule -----------------------------------------------------------


def test_sigma_endpoints_are_exact():
    cfg = FieldConfig(levels=4, lagrangian_levels=2, base_res=8, max_res=64, sigma_decay_steps=1000)
    for level, n in enumerate(cfg.resolutions()):
        assert sigma_schedule(cfg, level, 0) == 50 / n
        assert sigma_schedule(cfg, level, 1000) == 5 / n
        assert sigma_schedule(cfg, level, 5000) == 5 / n


def test_sigma_midpoint():
    cfg = FieldConfig(levels=2, base_res=8, max_res=16, sigma_decay_steps=1000)
    assert sigma_schedule(cfg, 1, 500) * 16 == pytest.approx(50 * 10**-0.5, rel=1e-12)
    assert 50 * 10**-0.5 == pytest.approx(15.811, abs=1e-3)


@given(st.integers(1, 5000), st.integers(0, 10_000), st.integers(0, 10_000))
def test_sigma_monotone(horizon, a, b):
    cfg = FieldConfig(levels=2, base_res=4, max_res=32, sigma_decay_steps=horizon)
    lo, hi = sorted((a, b))
    s_lo, s_hi = sigma_schedule(cfg, 1, lo), sigma_schedule(cfg, 1, hi)
    if hi <= horizon and lo < hi:
        assert s_lo > s_hi
    if lo >= horizon:
        assert s_lo == s_hi == 5 / 32
    assert s_lo >= s_hi


def test_level_sigmas_cover_lagrangian_levels():
    cfg = FieldConfig(levels=4, lagrangian_levels=2, base_res=8, max_res=64, sigma_decay_steps=10)
    assert level_sigmas(cfg, 10) == [5 / 32, 5 / 64]
