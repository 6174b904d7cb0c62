"""Square-cosine DDPM schedule, forward noising and the ancestral reverse step."""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

COSINE_OFFSET = 0.008
BETA_MAX = 0.999
CLAMP = 5.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficient tables indexed by diffusion step.

    ``alpha_bar`` has T+1 entries (index 0 is clean data). ``beta`` and
    ``sigma`` also have T+1 entries so they can be indexed by t directly;
    their index 0 is unused and held at 0.
    """

    T: int
    alpha_bar: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_alpha_bar(cls, alpha_bar: Sequence[float]) -> NoiseSchedule:
        ab = np.asarray(alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ConfigError("alpha_bar needs at least two entries (t=0 and t=1)")
        T = ab.size - 1
        beta = np.zeros(T + 1)
        beta[1:] = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, BETA_MAX)
        sigma = np.zeros(T + 1)
        for t in range(2, T + 1):
            sigma[t] = math.sqrt(beta[t] * (1.0 - ab[t - 1]) / (1.0 - ab[t]))
        for arr in (ab, beta, sigma):
            arr.setflags(write=False)
        return cls(T=T, alpha_bar=ab, beta=beta, sigma=sigma)

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise UsageError(f"diffusion step {t} outside 1..{self.T}")


def cosine_alpha_bar(t: float, T: int, s: float = COSINE_OFFSET) -> float:
    """f(t)/f(0) for f(t) = cos²(((t/T + s)/(1 + s))·π/2)."""
    f = math.cos(((t / T + s) / (1.0 + s)) * math.pi / 2) ** 2
    f0 = math.cos((s / (1.0 + s)) * math.pi / 2) ** 2
    return f / f0


@lru_cache(maxsize=64)
def square_cosine_schedule(T: int = 50, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"need at least one diffusion step, got T={T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * np.pi / 2) ** 2
    alpha_bar = f / f[0]
    alpha_bar[0] = 1.0
    return NoiseSchedule.from_alpha_bar(alpha_bar)


def add_noise(x0, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    """x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps."""
    sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def add_noise_batch(x0: np.ndarray, eps: np.ndarray, t: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Vectorised ``add_noise`` with one step per leading-axis row."""
    t = np.asarray(t)
    if t.min() < 1 or t.max() > sched.T:
        raise UsageError(f"diffusion steps must lie in 1..{sched.T}")
    shape = (-1,) + (1,) * (x0.ndim - 1)
    ab = sched.alpha_bar[t].reshape(shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddpm_step(xt, eps_hat, t: int, sched: NoiseSchedule, noise) -> np.ndarray:
    """One ancestral step x_t → x_{t−1}, clamped to ±CLAMP."""
    sched.check_step(t)
    xt = np.asarray(xt, dtype=np.float64)
    beta = sched.beta[t]
    mean = (xt - (beta / math.sqrt(1.0 - sched.alpha_bar[t])) * np.asarray(eps_hat)) / math.sqrt(1.0 - beta)
    if t > 1:
        mean = mean + sched.sigma[t] * np.asarray(noise)
    return np.clip(mean, -CLAMP, CLAMP)


class NoisePredictor(Protocol):
    """Anything that predicts ε for a batch of noisy windows."""

    horizon: int
    action_dim: int

    def predict_noise(self, x: np.ndarray, t: int, obs: np.ndarray) -> np.ndarray: ...


def sample_chunks(
    denoiser: NoisePredictor,
    obs: np.ndarray,
    sched: NoiseSchedule,
    rngs: Sequence[np.random.Generator],
) -> np.ndarray:
    """Batched ancestral sampling; row b draws all of its noise from ``rngs[b]``."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if len(rngs) != obs.shape[0]:
        raise ShapeError(f"{obs.shape[0]} observations but {len(rngs)} generators")
    H, A = denoiser.horizon, denoiser.action_dim
    x = np.stack([rng.standard_normal((H, A)) for rng in rngs])
    for t in range(sched.T, 0, -1):
        eps_hat = np.asarray(denoiser.predict_noise(x, t, obs))
        if eps_hat.shape != x.shape:
            raise ConfigError(f"denoiser returned {eps_hat.shape}, expected {x.shape}")
        noise = np.stack([rng.standard_normal((H, A)) for rng in rngs]) if t > 1 else 0.0
        x = ddpm_step(x, eps_hat, t, sched, noise)
    return x


def sample_chunk(denoiser: NoisePredictor, obs, sched: NoiseSchedule, rng_seed: int) -> np.ndarray:
    """Draw one ``[H, action_dim]`` window conditioned on ``obs``."""
    rng = np.random.default_rng(rng_seed)
    return sample_chunks(denoiser, np.asarray(obs, dtype=np.float64)[None], sched, [rng])[0]
