from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffclone.errors import ConfigError, ShapeError, UsageError
from diffclone.schedule import (
    CLAMP,
    NoiseSchedule,
    add_noise,
    add_noise_batch,
    cosine_alpha_bar,
    ddpm_step,
    sample_chunk,
    sample_chunks,
    square_cosine_schedule,
)


def reference_alpha_bar(t, T, s=0.008):
    f = lambda u: math.cos(((u / T + s) / (1 + s)) * math.pi / 2) ** 2
    return f(t) / f(0)


# ᾱ_50 of the T=50 schedule, evaluated once from the closed form with mpmath-free
# double arithmetic (cos² of ((1 + 0.008)/1.008)·π/2 over cos² of (0.008/1.008)·π/2)
ALPHA_BAR_50 = reference_alpha_bar(50, 50)


def test_endpoints_and_closed_form():
    sched = square_cosine_schedule(50)
    assert sched.alpha_bar[0] == 1.0
    assert abs(sched.alpha_bar[50] - ALPHA_BAR_50) <= 1e-12
    assert abs(sched.alpha_bar[50] - cosine_alpha_bar(50, 50)) <= 1e-12
    assert sched.alpha_bar[50] > 0
    assert sched.sigma[1] == 0.0


def test_known_values():
    sched = square_cosine_schedule(50)
    for t in (1, 10, 25, 49):
        assert abs(sched.alpha_bar[t] - reference_alpha_bar(t, 50)) <= 1e-14
    assert sched.beta[50] == 0.999


@pytest.mark.parametrize("T", [1, 2, 3, 10, 50, 100, 200])
def test_invariants_for_many_lengths(T):
    sched = square_cosine_schedule(T)
    ab = sched.alpha_bar
    assert ab.shape == (T + 1,)
    assert ab[0] == 1.0 and ab[T] > 0
    assert np.all(np.diff(ab) < 0)
    assert np.all(sched.beta[1:] > 0) and np.all(sched.beta[1:] <= 0.999)
    for t in range(1, T + 1):
        expected = min(max(1 - ab[t] / ab[t - 1], 0.0), 0.999)
        assert sched.beta[t] == pytest.approx(expected, rel=1e-12)
    assert sched.sigma[1] == 0.0
    for t in range(2, T + 1):
        want = sched.beta[t] * (1 - ab[t - 1]) / (1 - ab[t])
        assert sched.sigma[t] ** 2 == pytest.approx(want, rel=1e-12)


def test_schedule_is_immutable():
    sched = square_cosine_schedule(10)
    with pytest.raises(ValueError):
        sched.alpha_bar[3] = 0.5


def test_bad_length():
    with pytest.raises(ConfigError):
        square_cosine_schedule(0)


# forward noising -----------------------------------------------------------------

def test_add_noise_extremes():
    sched = NoiseSchedule.from_alpha_bar([1.0, 1.0 - 1e-300, 0.0])
    x0, eps = np.array([1.0, -2.0]), np.array([0.3, 0.7])
    clean = NoiseSchedule.from_alpha_bar([1.0, 1.0])
    assert np.array_equal(add_noise(x0, eps, 1, clean), x0)
    assert np.array_equal(add_noise(x0, eps, 2, sched), eps)


def test_add_noise_formula_oracle():
    rng = np.random.default_rng(0)
    sched = square_cosine_schedule(50)
    for t in (1, 7, 33, 50):
        x0, eps = rng.standard_normal((16, 3)), rng.standard_normal((16, 3))
        ab = reference_alpha_bar(t, 50)
        want = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
        np.testing.assert_allclose(add_noise(x0, eps, t, sched), want, rtol=0, atol=1e-12)


def test_add_noise_batch_matches_single():
    rng = np.random.default_rng(1)
    sched = square_cosine_schedule(50)
    x0, eps = rng.standard_normal((5, 4, 2)), rng.standard_normal((5, 4, 2))
    t = np.array([1, 5, 20, 49, 50])
    batch = add_noise_batch(x0, eps, t, sched)
    for i in range(5):
        np.testing.assert_allclose(batch[i], add_noise(x0[i], eps[i], int(t[i]), sched), rtol=0, atol=1e-15)


def test_step_range_errors():
    sched = square_cosine_schedule(10)
    with pytest.raises(UsageError):
        add_noise(np.zeros(2), np.zeros(2), 0, sched)
    with pytest.raises(UsageError):
        ddpm_step(np.zeros(2), np.zeros(2), 11, sched, np.zeros(2))
    with pytest.raises(UsageError):
        add_noise_batch(np.zeros((1, 2)), np.zeros((1, 2)), np.array([11]), sched)
    with pytest.raises(ShapeError):
        add_noise(np.zeros(2), np.zeros(3), 1, sched)


# reverse step --------------------------------------------------------------------

def test_zero_input_gives_zero_mean():
    sched = square_cosine_schedule(50)
    assert np.array_equal(ddpm_step(np.zeros(4), np.zeros(4), 10, sched, np.zeros(4)), np.zeros(4))


def test_t1_ignores_noise():
    sched = square_cosine_schedule(50)
    rng = np.random.default_rng(2)
    x, e = rng.standard_normal(6), rng.standard_normal(6)
    a = ddpm_step(x, e, 1, sched, rng.standard_normal(6))
    b = ddpm_step(x, e, 1, sched, 100 * rng.standard_normal(6))
    assert np.array_equal(a, b)


def test_t1_inversion_is_exact():
    sched = square_cosine_schedule(50)
    rng = np.random.default_rng(3)
    x0, eps = rng.standard_normal((16, 7)), rng.standard_normal((16, 7))
    x1 = add_noise(x0, eps, 1, sched)
    assert np.max(np.abs(ddpm_step(x1, eps, 1, sched, np.zeros_like(x1)) - x0)) <= 1e-10


def test_single_step_chain_inversion():
    # a well-conditioned one-step schedule; the cosine T=1 table has ᾱ_1 ≈ 4e-33
    sched = NoiseSchedule.from_alpha_bar([1.0, 0.9])
    rng = np.random.default_rng(4)
    x0, eps = rng.uniform(-2, 2, (8, 3)), rng.standard_normal((8, 3))
    x1 = add_noise(x0, eps, 1, sched)
    np.testing.assert_allclose(ddpm_step(x1, eps, 1, sched, np.zeros_like(x1)), x0, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**32 - 1))
def test_oracle_reverse_recovers_x0_up_to_sigma_noise(t, seed):
    sched = square_cosine_schedule(50)
    rng = np.random.default_rng(seed)
    x0, eps, z = rng.uniform(-1, 1, 5), rng.standard_normal(5), rng.standard_normal(5)
    xt = add_noise(x0, eps, t, sched)
    back = ddpm_step(xt, eps, t, sched, z)
    # with the true ε, the deterministic part equals the posterior mean of x_{t-1} given x0 and ε
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    beta = sched.beta[t]
    mean = (xt - beta / math.sqrt(1 - ab) * eps) / math.sqrt(1 - beta)
    np.testing.assert_allclose(back, np.clip(mean + sched.sigma[t] * z, -CLAMP, CLAMP), rtol=0, atol=1e-12)
    if beta < 0.999:
        # unclipped β: mean = √ᾱ_{t−1}·x0 + √α_t·(1−ᾱ_{t−1})/√(1−ᾱ_t)·ε
        coef = math.sqrt(1 - beta) * (1 - ab_prev) / math.sqrt(1 - ab)
        np.testing.assert_allclose(mean, math.sqrt(ab_prev) * x0 + coef * eps, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=10))
def test_clamp_idempotent_and_inactive_in_range(values):
    sched = NoiseSchedule.from_alpha_bar([1.0, 0.99])
    x = np.array(values)
    zero = np.zeros_like(x)
    once = ddpm_step(x, zero, 1, sched, zero)
    assert np.all(np.abs(once) <= CLAMP)
    in_range = np.abs(x / math.sqrt(1 - sched.beta[1])) < CLAMP
    np.testing.assert_array_equal(once[in_range], (x / math.sqrt(1 - sched.beta[1]))[in_range])
    assert np.array_equal(np.clip(once, -CLAMP, CLAMP), once)


# sampling ------------------------------------------------------------------------

class ZeroDenoiser:
    horizon, action_dim = 4, 2

    def predict_noise(self, x, t, obs):
        return np.zeros_like(x)


class BadDenoiser(ZeroDenoiser):
    def predict_noise(self, x, t, obs):
        return np.zeros((x.shape[0], 3, 2))


def test_stub_single_step_sampling():
    sched = square_cosine_schedule(1)
    out = sample_chunk(ZeroDenoiser(), np.zeros(3), sched, rng_seed=11)
    draw = np.random.default_rng(11).standard_normal((4, 2))
    assert out.shape == (4, 2)
    np.testing.assert_array_equal(out, np.clip(draw / math.sqrt(1 - sched.beta[1]), -CLAMP, CLAMP))


def test_sampling_is_seeded():
    sched = square_cosine_schedule(20)
    a = sample_chunk(ZeroDenoiser(), np.zeros(3), sched, 5)
    b = sample_chunk(ZeroDenoiser(), np.zeros(3), sched, 5)
    c = sample_chunk(ZeroDenoiser(), np.zeros(3), sched, 6)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_batched_rows_match_single_draws():
    sched = square_cosine_schedule(20)
    rngs = [np.random.default_rng(s) for s in (3, 4)]
    batch = sample_chunks(ZeroDenoiser(), np.zeros((2, 3)), sched, rngs)
    for row, s in zip(batch, (3, 4)):
        assert np.array_equal(row, sample_chunk(ZeroDenoiser(), np.zeros(3), sched, s))


def test_denoiser_shape_mismatch():
    with pytest.raises(ConfigError):
        sample_chunk(BadDenoiser(), np.zeros(3), square_cosine_schedule(5), 0)
