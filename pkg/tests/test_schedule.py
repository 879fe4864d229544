import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from protodiff.schedule import build_cosine_schedule, subsample_timesteps


def _hand_alpha_bar(t, T, s=0.008):
    f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2
    return f(t) / f(0)


@pytest.mark.parametrize("T", [1, 4, 50, 1000])
def test_schedule_invariants(T):
    sch = build_cosine_schedule(T)
    ab = sch.alpha_bars
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert 0 < ab[T] < 0.01
    assert np.all(sch.betas > 0) and np.all(sch.betas <= 0.999)
    assert np.all(sch.alphas >= 0.001) and np.all(sch.alphas < 1)
    assert np.max(np.abs(ab[1:] - ab[:-1] * sch.alphas)) <= 1e-12


def test_large_T_reaches_near_pure_noise():
    sch = build_cosine_schedule(1000, 0.008)
    assert sch.alpha_bars[-1] < 1e-3
    assert sch.betas[-1] == 0.999


def test_T4_betas_match_hand_arithmetic():
    sch = build_cosine_schedule(4, 0.008)
    expected = [min(1 - _hand_alpha_bar(t, 4) / _hand_alpha_bar(t - 1, 4), 0.999)
                for t in range(1, 5)]
    np.testing.assert_allclose(sch.betas, expected, rtol=1e-12)
    # unclipped steps reproduce the closed form directly
    for t in range(1, 4):
        assert sch.alpha_bars[t] == pytest.approx(_hand_alpha_bar(t, 4), rel=1e-12)


@pytest.mark.parametrize("T,s", [(0, 0.008), (10, 0.0), (10, 1.0), (10, -0.1)])
def test_invalid_parameters_rejected(T, s):
    with pytest.raises(ValueError):
        build_cosine_schedule(T, s)


@given(st.integers(1, 2000), st.floats(1e-4, 0.5))
def test_schedule_property(T, s):
    sch = build_cosine_schedule(T, s)
    assert sch.alpha_bars[0] == 1.0
    assert np.all(np.diff(sch.alpha_bars) < 0)
    assert np.max(sch.betas) <= 0.999


def test_subsample_single_and_full():
    assert subsample_timesteps(1000, 1) == [1000]
    assert subsample_timesteps(10, 10) == list(range(10, 0, -1))


def test_subsample_50_of_1000():
    ts = subsample_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 1000 and ts[-1] == 1
    gaps = [a - b for a, b in zip(ts, ts[1:])]
    assert max(gaps) - min(gaps) <= 1


@given(st.integers(1, 3000), st.data())
def test_subsample_property(T, data):
    n = data.draw(st.integers(1, T))
    ts = subsample_timesteps(T, n)
    assert len(ts) == n and ts[0] == T
    assert n == 1 or ts[-1] == 1
    gaps = [a - b for a, b in zip(ts, ts[1:])]
    assert all(g >= 1 for g in gaps)
    assert not gaps or max(gaps) - min(gaps) <= 1


def test_subsample_rejects_too_many():
    with pytest.raises(ValueError):
        subsample_timesteps(10, 11)
    with pytest.raises(ValueError):
        subsample_timesteps(10, 0)
