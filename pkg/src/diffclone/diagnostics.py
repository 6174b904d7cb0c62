"""Self-checks shared by the ``diag`` command and the test-suite: gradient checks,
schedule properties and the bimodal / constant-action training fixtures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataset import NormStats, TrainingWindow
from .denoiser import DenoiserConfig, build, forward
from .encoder import EncoderNet, contrastive_margin, infonce_loss, l2_normalize, pretrain
from .layers import MLP
from .policies import BcConfig, DiffCloneConfig, train_bc, train_diffclone
from .schedule import add_noise, cosine_alpha_bar, ddpm_step, square_cosine_schedule


@dataclass
class Check:
    name: str
    value: float
    limit: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} value={self.value:.6g} limit={self.limit:.6g}"


# gradients ----------------------------------------------------------------------

TINY_DENOISER = DenoiserConfig(
    action_dim=2, horizon=4, channels=(4, 8), kernel_size=3, norm_groups=2,
    obs_dim=3, time_embed_dim=4, cond_hidden=6,
)
GRAD_TOL = 1e-4


def _perturb(params, rng: np.random.Generator, scale: float = 0.3) -> None:
    for p in params:
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)


def gradcheck_denoiser(point_seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(point_seed)
    net = build(TINY_DENOISER, point_seed)
    _perturb(net.parameters(), rng)
    cfg = TINY_DENOISER
    x = rng.standard_normal((2, cfg.horizon, cfg.action_dim))
    obs = rng.standard_normal((2, cfg.obs_dim))
    eps = rng.standard_normal(x.shape)
    t = np.array([3, 17])
    return T.gradcheck(lambda: T.mse_loss(forward(net, x, t, obs), eps), net.parameters(), h)


def gradcheck_bc(point_seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(point_seed)
    net = MLP((5, 8, 8, 3), rng)
    _perturb(net.parameters(), rng)
    x, y = rng.standard_normal((6, 5)), rng.standard_normal((6, 3))
    return T.gradcheck(lambda: T.mse_loss(net(x), y), net.parameters(), h)


def gradcheck_encoder(point_seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(point_seed)
    enc = EncoderNet(in_dim=7, embed_dim=4, hidden=(8,), seed=point_seed)
    _perturb(enc.parameters(), rng)
    v1, v2 = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
    negatives = rng.standard_normal((6, 4))

    def loss():
        return infonce_loss(l2_normalize(enc(v1)), l2_normalize(enc(v2)), negatives, 0.5)

    return T.gradcheck(loss, enc.parameters(), h)


def gradcheck_checks(points: int = 3) -> list[Check]:
    checks = []
    for name, fn in (("denoiser", gradcheck_denoiser), ("bc", gradcheck_bc), ("encoder", gradcheck_encoder)):
        worst = max(fn(seed) for seed in range(points))
        checks.append(Check(f"gradcheck.{name}.max_rel_err", worst, GRAD_TOL, worst <= GRAD_TOL))
    return checks


# schedule -----------------------------------------------------------------------

def schedule_checks(T_steps: int = 50) -> list[Check]:
    sched = square_cosine_schedule(T_steps)
    ab = sched.alpha_bar
    diffs = np.diff(ab)
    closed = cosine_alpha_bar(T_steps, T_steps)
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    x1 = add_noise(x0, eps, 1, sched)
    back = ddpm_step(x1, eps, 1, sched, np.zeros_like(x1))
    inversion = float(np.max(np.abs(back - x0)))
    return [
        Check("schedule.alpha_bar_0_minus_1", abs(ab[0] - 1.0), 0.0, ab[0] == 1.0),
        Check("schedule.max_step_difference", float(diffs.max()), 0.0, bool(np.all(diffs < 0))),
        Check("schedule.alpha_bar_T_vs_closed_form", abs(ab[T_steps] - closed), 1e-12, abs(ab[T_steps] - closed) <= 1e-12),
        Check("schedule.sigma_1", float(sched.sigma[1]), 0.0, sched.sigma[1] == 0.0),
        Check("schedule.t1_inversion_error", inversion, 1e-10, inversion <= 1e-10),
    ]


# training fixtures --------------------------------------------------------------

def identity_stats(obs_dim: int, action_dim: int) -> NormStats:
    return NormStats(np.zeros(obs_dim), np.ones(obs_dim), np.zeros(action_dim), np.ones(action_dim))


FIXTURE_CONFIG = DiffCloneConfig(
    horizon=4, exec_horizon=4, diffusion_steps=50, batch_size=100, lr=3e-3,
    channels=(16, 32), norm_groups=4, time_embed_dim=16, cond_hidden=32,
)


def bimodal_windows(n: int = 400, horizon: int = 4) -> list[TrainingWindow]:
    """One constant observation; half the windows act +1 throughout, half −1."""
    obs = np.zeros(1)
    return [
        TrainingWindow(obs.copy(), np.full((horizon, 1), 1.0 if i % 2 == 0 else -1.0), 0)
        for i in range(n)
    ]


def constant_windows(c, n: int = 500, horizon: int = 4, obs_dim: int = 3, seed: int = 0) -> list[TrainingWindow]:
    rng = np.random.default_rng(seed)
    c = np.asarray(c, dtype=np.float64)
    return [TrainingWindow(rng.standard_normal(obs_dim), np.tile(c, (horizon, 1)), 0) for _ in range(n)]


@dataclass
class BimodalResult:
    near_plus: float
    near_minus: float
    near_zero: float
    bc_prediction: float

    def checks(self) -> list[Check]:
        return [
            Check("bimodal.diffclone.frac_near_plus1", self.near_plus, 0.25, self.near_plus >= 0.25),
            Check("bimodal.diffclone.frac_near_minus1", self.near_minus, 0.25, self.near_minus >= 0.25),
            Check("bimodal.diffclone.frac_near_0", self.near_zero, 0.10, self.near_zero <= 0.10),
            Check("bimodal.bc.abs_prediction", abs(self.bc_prediction), 0.2, abs(self.bc_prediction) <= 0.2),
        ]


def run_bimodal(seed: int = 0, epochs: int = 150, samples: int = 200, bc_epochs: int = 100) -> BimodalResult:
    windows = bimodal_windows(horizon=FIXTURE_CONFIG.horizon)
    stats = identity_stats(1, 1)
    cfg = DiffCloneConfig(**{**FIXTURE_CONFIG.__dict__, "epochs": epochs})
    policy, _ = train_diffclone(windows, cfg, seed, stats)
    chunks = policy.act_batch(np.zeros((samples, 0)), np.zeros((samples, 1)), list(range(samples)))
    first = chunks[:, 0, 0]
    bc, _ = train_bc(windows, BcConfig(hidden=(32, 32), epochs=bc_epochs, batch_size=100), seed, stats)
    pred = float(bc.act(np.zeros(0), np.zeros(1))[0, 0])
    return BimodalResult(
        float(np.mean(np.abs(first - 1.0) <= 0.2)),
        float(np.mean(np.abs(first + 1.0) <= 0.2)),
        float(np.mean(np.abs(first) <= 0.2)),
        pred,
    )


def run_constant(c=(0.5, -0.3), seed: int = 0, epochs: int = 100, samples: int = 200) -> float:
    """Fraction of sampled actions within L∞ 0.05 of ``c`` after training on constant windows."""
    c = np.asarray(c, dtype=np.float64)
    windows = constant_windows(c, horizon=FIXTURE_CONFIG.horizon, seed=seed)
    stats = identity_stats(3, c.size)
    cfg = DiffCloneConfig(**{**FIXTURE_CONFIG.__dict__, "epochs": epochs})
    policy, _ = train_diffclone(windows, cfg, seed, stats)
    rng = np.random.default_rng(seed + 1)
    obs = rng.standard_normal((samples, 3))
    # features are the raw observation (identity encoder) followed by an empty joint vector
    chunks = policy.act_batch(obs, np.zeros((samples, 0)), list(range(samples)))
    err = np.max(np.abs(chunks[:, 0, :] - c), axis=1)
    return float(np.mean(err <= 0.05))


def moco_clusters(seed: int = 0, per_cluster: int = 64, spread: float = 0.05) -> list[np.ndarray]:
    """Four tight clusters in 7-d at (±2, 0) and (0, ±2) on the first two axes, 1 elsewhere."""
    rng = np.random.default_rng(seed)
    centers = np.ones((4, 7))
    centers[:, :2] = [[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.0, -2.0]]
    return [c + rng.normal(0.0, spread, (per_cluster, 7)) for c in centers]


def run_moco_margin(seed: int = 0, epochs: int = 50) -> tuple[float, float]:
    """Contrastive margin of a fresh encoder before and after MoCo pretraining on the clusters."""
    clusters = moco_clusters(seed)
    enc = EncoderNet(in_dim=7, seed=seed)
    before = contrastive_margin(enc, clusters, seed + 100)
    pretrain(enc, np.concatenate(clusters), "moco", epochs, seed)
    return before, contrastive_margin(enc, clusters, seed + 100)


def fraction_within(samples: np.ndarray, target: float, radius: float) -> float:
    return float(np.mean(np.abs(np.asarray(samples) - target) <= radius))


def log_k_plus_one(k: int) -> float:
    return math.log(k + 1)
