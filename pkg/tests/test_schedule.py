import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from occscene.errors import IndexOutOfRange, InvalidRange, ShapeMismatch
from occscene.schedule import NoiseSchedule, ddpm_step, make_linear_schedule, q_sample, respace

# alpha_bar[199] of the default linear schedule, from an independent running product
ALPHA_BAR_199 = 0.13218275425061793


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar, [0.9])


def test_two_step_products():
    s = NoiseSchedule.from_betas([0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], rtol=0, atol=1e-15)


def test_default_schedule_terminal_alpha_bar():
    s = make_linear_schedule(200, 1e-4, 0.02)
    prod = 1.0
    for k in range(200):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * k / 199)
    assert abs(prod - ALPHA_BAR_199) < 1e-12
    assert abs(s.alpha_bar[199] - ALPHA_BAR_199) < 1e-12


@given(st.integers(1, 400), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
def test_schedule_invariants(T, start, extra):
    end = min(start + extra, 0.9)
    s = make_linear_schedule(T, start, end)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((np.sqrt(s.alpha_bar) > 0) & (np.sqrt(s.alpha_bar) < 1))
    running = np.cumprod(1 - s.beta)
    np.testing.assert_allclose(s.alpha_bar, running, rtol=0, atol=1e-12)


def test_invalid_schedules():
    with pytest.raises(InvalidRange):
        make_linear_schedule(0)
    with pytest.raises(InvalidRange):
        make_linear_schedule(10, 0.2, 0.1)
    with pytest.raises(InvalidRange):
        NoiseSchedule.from_betas([0.5, 1.0])


def test_q_sample_noiseless_limit():
    s = NoiseSchedule(np.array([0.0]), np.array([1.0]), np.array([1.0]), np.array([0]))
    y0 = torch.randn(3, 4, dtype=torch.float64)
    assert torch.equal(q_sample(y0, 0, torch.randn(3, 4, dtype=torch.float64), s), y0)


def test_q_sample_scalar_value():
    s = NoiseSchedule(np.array([0.75]), np.array([0.25]), np.array([0.25]), np.array([0]))
    out = q_sample(torch.tensor([2.0], dtype=torch.float64), 0, torch.tensor([1.0], dtype=torch.float64), s)
    assert abs(float(out) - (1.0 + math.sqrt(0.75))) < 1e-15
    assert abs(float(out) - 1.8660) < 1e-4


def test_q_sample_per_sample_timesteps_and_errors():
    s = make_linear_schedule(50)
    y0 = torch.randn(3, 2, dtype=torch.float64)
    eps = torch.randn(3, 2, dtype=torch.float64)
    t = torch.tensor([0, 10, 49])
    out = q_sample(y0, t, eps, s)
    for i in range(3):
        assert torch.allclose(out[i], q_sample(y0[i], int(t[i]), eps[i], s), atol=1e-15)
    with pytest.raises(IndexOutOfRange):
        q_sample(y0, 50, eps, s)
    with pytest.raises(ShapeMismatch):
        q_sample(y0, 0, eps[:2], s)


@given(st.floats(-3, 3), st.integers(0, 199), st.integers(0, 1000))
def test_q_sample_is_linear(a, t, seed):
    s = make_linear_schedule(200)
    g = torch.Generator().manual_seed(seed)
    y0 = torch.randn(5, generator=g, dtype=torch.float64)
    eps = torch.randn(5, generator=g, dtype=torch.float64)
    assert torch.allclose(q_sample(a * y0, t, a * eps, s), a * q_sample(y0, t, eps, s), atol=1e-12)


def test_ddpm_step_scalar_value():
    s = NoiseSchedule(np.array([0.01]), np.array([0.99]), np.array([0.99]), np.array([0]))
    s2 = NoiseSchedule(np.array([0.5, 0.01]), np.array([0.5, 0.99]), np.array([0.5, 0.99]), np.array([0, 1]))
    one = torch.tensor([1.0], dtype=torch.float64)
    half = torch.tensor([0.5], dtype=torch.float64)
    zero = torch.zeros(1, dtype=torch.float64)
    expected = (1 / math.sqrt(0.99)) * (1 - (0.01 / 0.1) * 0.5)
    assert abs(float(ddpm_step(one, half, 0, zero, s)) - expected) < 1e-12
    assert abs(float(ddpm_step(one, half, 1, zero, s2)) - expected) < 1e-12
    assert abs(expected - 0.95479) < 1e-5


def test_ddpm_step_zero_eps_reduction_and_fixed_point():
    s = make_linear_schedule(20)
    y = torch.randn(4, dtype=torch.float64)
    z = torch.zeros(4, dtype=torch.float64)
    out = ddpm_step(y, z, 7, z, s)
    assert torch.allclose(out, y / math.sqrt(s.alpha[7]), atol=1e-15)
    s1 = make_linear_schedule(1, 0.1, 0.1)
    assert torch.count_nonzero(ddpm_step(z, z, 0, z, s1)) == 0
    with pytest.raises(ValueError):
        ddpm_step(y, z, 0, torch.ones(4, dtype=torch.float64), s)


def test_respace_keeps_cumulative_products():
    s = make_linear_schedule(200)
    r = respace(s, 50)
    assert r.T == 50
    assert r.timesteps[0] == 3 and r.timesteps[-1] == 199
    np.testing.assert_allclose(r.alpha_bar, s.alpha_bar[r.timesteps], rtol=1e-12)
    assert respace(s, 200) is s
    with pytest.raises(InvalidRange):
        respace(s, 0)


@given(st.integers(1, 300), st.data())
def test_respace_strides_are_even(T, data):
    steps = data.draw(st.integers(1, T))
    r = respace(make_linear_schedule(T), steps)
    gaps = np.diff(np.concatenate([[-1], r.timesteps]))
    assert r.T == steps and r.timesteps[-1] == T - 1
    assert gaps.min() >= 1 and gaps.max() - gaps.min() <= 1
