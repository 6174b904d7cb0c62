"""Agents: the diffusion policy, a feed-forward BC baseline, a nearest-neighbour baseline,
and the receding-horizon controller that drives any of them in the environment."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .dataset import NormStats, TrainingWindow, observation_features, stack_windows
from .denoiser import DenoiserConfig, DenoiserNet, build, forward
from .encoder import EncoderNet, IdentityEncoder
from .errors import ConfigError, FormatError, ShapeError, UsageError
from .layers import MLP
from .report import TrainReport
from .rng import derive_seed, stream
from .schedule import NoiseSchedule, add_noise_batch, sample_chunks, square_cosine_schedule

log = logging.getLogger("diffclone.policies")


def _typed_from_dict(cls, d: dict[str, str]):
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        raw, default = d[f.name], f.default
        if isinstance(default, tuple):
            kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
        elif isinstance(default, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return cls(**kwargs)


def _to_text(cfg) -> dict[str, str]:
    return {k: ",".join(map(str, v)) if isinstance(v, tuple) else str(v) for k, v in asdict(cfg).items()}


# shared plumbing ----------------------------------------------------------------

def _encoder_entries(encoder) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if encoder is None or isinstance(encoder, IdentityEncoder):
        return {"encoder": "identity"}, {}
    return {"encoder": "net", **encoder.config()}, encoder.state_arrays("encoder.")


def _encoder_from(cfg: dict[str, str], arrays: dict[str, np.ndarray]):
    if cfg.get("encoder", "identity") == "identity":
        return None
    enc = EncoderNet.from_config(cfg)
    enc.load_arrays(arrays, "encoder.")
    return enc


def _stats_from(cfg: dict[str, str], arrays: dict[str, np.ndarray]) -> NormStats:
    return NormStats.from_arrays(arrays, float(cfg.get("stats_epsilon", "1e-6")))


def _features(policy, raw_obs, joint) -> np.ndarray:
    """Normalised encoder features for one observation ``[D]`` or a batch ``[B, D]``."""
    feats = observation_features(raw_obs, joint, policy.encoder)
    if feats.shape[-1] != policy.stats.obs_mean.size:
        raise ShapeError(f"observation features have dim {feats.shape[-1]}, policy expects {policy.stats.obs_mean.size}")
    return policy.stats.normalize_obs(feats)


def _check_windows(windows: Sequence[TrainingWindow]) -> None:
    if not windows:
        raise UsageError("no training windows")


# diffusion policy ---------------------------------------------------------------

@dataclass(frozen=True)
class DiffCloneConfig:
    horizon: int = 16
    exec_horizon: int = 8
    diffusion_steps: int = 50
    batch_size: int = 128
    lr: float = 1e-4
    epochs: int = 100
    channels: tuple[int, ...] = (32, 64)
    kernel_size: int = 3
    norm_groups: int = 4
    time_embed_dim: int = 32
    cond_hidden: int = 64
    ema_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def validate(self) -> None:
        if not 1 <= self.exec_horizon <= self.horizon:
            raise ConfigError(f"execution horizon {self.exec_horizon} must lie in 1..{self.horizon}")
        if self.diffusion_steps < 1 or self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("diffusion_steps, batch_size, lr must be positive and epochs ≥ 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")

    def denoiser_config(self, action_dim: int, obs_dim: int) -> DenoiserConfig:
        return DenoiserConfig(
            action_dim=action_dim,
            horizon=self.horizon,
            channels=self.channels,
            kernel_size=self.kernel_size,
            norm_groups=self.norm_groups,
            obs_dim=obs_dim,
            time_embed_dim=self.time_embed_dim,
            cond_hidden=self.cond_hidden,
            diffusion_steps=self.diffusion_steps,
        )


@dataclass
class DiffClonePolicy:
    denoiser: DenoiserNet
    schedule: NoiseSchedule
    stats: NormStats
    encoder: EncoderNet | None = None
    exec_horizon: int = 8

    def __post_init__(self):
        if not 1 <= self.exec_horizon <= self.horizon:
            raise ConfigError(f"execution horizon {self.exec_horizon} must lie in 1..{self.horizon}")
        cfg = self.denoiser.config
        if self.stats.obs_mean.size != cfg.obs_dim or self.stats.act_mean.size != cfg.action_dim:
            raise ShapeError("normalisation statistics do not match the denoiser dimensions")

    @property
    def horizon(self) -> int:
        return self.denoiser.horizon

    @property
    def action_dim(self) -> int:
        return self.denoiser.action_dim

    def act(self, raw_obs, joint, seed: int) -> np.ndarray:
        return infer_chunk(self, raw_obs, joint, seed)

    def act_batch(self, raw_obs, joint, seeds: Sequence[int]) -> np.ndarray:
        obs = _features(self, np.atleast_2d(raw_obs), np.atleast_2d(joint))
        rngs = [np.random.default_rng(s) for s in seeds]
        chunks = sample_chunks(self.denoiser, obs, self.schedule, rngs)
        return self.stats.denormalize_action(chunks)

    def save(self, path) -> None:
        cfg = {
            "kind": "diffclone",
            "exec_horizon": self.exec_horizon,
            "diffusion_steps": self.schedule.T,
            "stats_epsilon": repr(self.stats.epsilon),
            **self.denoiser.config.to_dict(),
        }
        enc_cfg, enc_arrays = _encoder_entries(self.encoder)
        cfg.update(enc_cfg)
        arrays = {**self.denoiser.state_arrays("denoiser."), **self.stats.arrays(), **enc_arrays}
        checkpoint.save(path, cfg, arrays)

    @classmethod
    def from_parts(cls, cfg: dict[str, str], arrays: dict[str, np.ndarray]) -> DiffClonePolicy:
        net = build(DenoiserConfig.from_dict(cfg), 0)
        net.load_arrays(arrays, "denoiser.")
        return cls(
            net,
            square_cosine_schedule(int(cfg["diffusion_steps"])),
            _stats_from(cfg, arrays),
            _encoder_from(cfg, arrays),
            int(cfg["exec_horizon"]),
        )


def infer_chunk(policy: DiffClonePolicy, raw_obs, joint, seed: int) -> np.ndarray:
    """Sample one ``[H, action_dim]`` chunk in environment units."""
    raw_obs, joint = np.asarray(raw_obs, dtype=np.float64), np.asarray(joint, dtype=np.float64)
    if raw_obs.ndim != 1 or joint.ndim != 1:
        raise ShapeError("infer_chunk takes a single observation and joint vector")
    return policy.act_batch(raw_obs[None], joint[None], [seed])[0]


def diffusion_loss(net: DenoiserNet, sched: NoiseSchedule, obs, actions, t, eps) -> T.Tensor:
    """MSE between injected noise and the denoiser's estimate at steps ``t``."""
    xt = add_noise_batch(actions, eps, t, sched)
    return T.mse_loss(forward(net, xt, t, obs), eps)


def train_diffclone(
    windows: Sequence[TrainingWindow],
    config: DiffCloneConfig,
    seed: int,
    stats: NormStats,
    encoder: EncoderNet | None = None,
) -> tuple[DiffClonePolicy, TrainReport]:
    """Fit the noise predictor on shuffled mini-batches; one report row per epoch."""
    _check_windows(windows)
    config.validate()
    obs, actions = stack_windows(windows)
    N, H, A = actions.shape
    if H != config.horizon:
        raise ShapeError(f"windows have horizon {H}, config expects {config.horizon}")
    net = build(config.denoiser_config(A, obs.shape[1]), derive_seed(seed, "init"))
    sched = square_cosine_schedule(config.diffusion_steps)
    shuffle_rng, noise_rng = stream(seed, "shuffle"), stream(seed, "noise")
    params = net.parameters()
    opt = T.Adam(params, lr=config.lr)
    ema = [p.data.copy() for p in params] if config.ema_decay else None
    report = TrainReport()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(N)
        total, count = 0.0, 0
        for lo in range(0, N, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            t = noise_rng.integers(1, sched.T + 1, size=idx.size)
            eps = noise_rng.standard_normal((idx.size, H, A))
            opt.zero_grad()
            loss = diffusion_loss(net, sched, obs[idx], actions[idx], t, eps)
            loss.backward()
            opt.step()
            if ema is not None:
                d = config.ema_decay
                for e, p in zip(ema, params):
                    e *= d
                    e += (1.0 - d) * p.data
            total += loss.item() * idx.size
            count += idx.size
        report.add(epoch, total / count, time.perf_counter() - start)
        log.debug("diffclone epoch %d loss %.5f", epoch, report.rows[-1][1])
    if ema is not None:
        for e, p in zip(ema, params):
            p.data = e
    policy = DiffClonePolicy(net, sched, stats, encoder, config.exec_horizon)
    return policy, report


# behaviour cloning --------------------------------------------------------------

@dataclass(frozen=True)
class BcConfig:
    hidden: tuple[int, ...] = (256, 256)
    horizon: int = 1
    batch_size: int = 128
    lr: float = 1e-3
    epochs: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self) -> None:
        if self.horizon < 1 or self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("horizon, batch_size, lr must be positive and epochs ≥ 0")


@dataclass
class BcPolicy:
    """obs → the next ``horizon`` actions; all of them are executed open-loop."""

    net: MLP
    stats: NormStats
    encoder: EncoderNet | None = None
    horizon: int = 1

    def __post_init__(self):
        if self.net.out_dim != self.horizon * self.stats.act_mean.size:
            raise ShapeError("network output does not match horizon × action_dim")

    @property
    def action_dim(self) -> int:
        return self.stats.act_mean.size

    @property
    def exec_horizon(self) -> int:
        return self.horizon

    def predict_normalized(self, obs_n: np.ndarray) -> np.ndarray:
        with T.no_grad():
            out = self.net(np.atleast_2d(obs_n)).data
        return out.reshape(-1, self.horizon, self.action_dim)

    def act(self, raw_obs, joint, seed: int = 0) -> np.ndarray:
        return self.act_batch(np.atleast_2d(raw_obs), np.atleast_2d(joint), [seed])[0]

    def act_batch(self, raw_obs, joint, seeds: Sequence[int]) -> np.ndarray:
        return self.stats.denormalize_action(self.predict_normalized(_features(self, raw_obs, joint)))

    def save(self, path) -> None:
        cfg = {
            "kind": "bc",
            "sizes": ",".join(map(str, self.net.sizes)),
            "horizon": self.horizon,
            "stats_epsilon": repr(self.stats.epsilon),
        }
        enc_cfg, enc_arrays = _encoder_entries(self.encoder)
        cfg.update(enc_cfg)
        checkpoint.save(path, cfg, {**self.net.state_arrays("net."), **self.stats.arrays(), **enc_arrays})

    @classmethod
    def from_parts(cls, cfg: dict[str, str], arrays: dict[str, np.ndarray]) -> BcPolicy:
        net = MLP([int(s) for s in cfg["sizes"].split(",")], np.random.default_rng(0))
        net.load_arrays(arrays, "net.")
        return cls(net, _stats_from(cfg, arrays), _encoder_from(cfg, arrays), int(cfg["horizon"]))


def train_bc(
    windows: Sequence[TrainingWindow],
    config: BcConfig,
    seed: int,
    stats: NormStats,
    encoder: EncoderNet | None = None,
) -> tuple[BcPolicy, TrainReport]:
    """Regress the first ``config.horizon`` actions of each window with MSE."""
    _check_windows(windows)
    config.validate()
    obs, actions = stack_windows(windows)
    if actions.shape[1] < config.horizon:
        raise ShapeError(f"windows hold {actions.shape[1]} actions, BC horizon is {config.horizon}")
    N, A = actions.shape[0], actions.shape[2]
    targets = actions[:, : config.horizon].reshape(N, config.horizon * A)
    net = MLP((obs.shape[1], *config.hidden, config.horizon * A), stream(seed, "init"))
    shuffle_rng = stream(seed, "shuffle")
    opt = T.Adam(net.parameters(), lr=config.lr)
    report = TrainReport()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(N)
        total = 0.0
        for lo in range(0, N, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            opt.zero_grad()
            loss = T.mse_loss(net(obs[idx]), targets[idx])
            loss.backward()
            opt.step()
            total += loss.item() * idx.size
        report.add(epoch, total / N, time.perf_counter() - start)
        log.debug("bc epoch %d loss %.5f", epoch, report.rows[-1][1])
    return BcPolicy(net, stats, encoder, config.horizon), report


# nearest neighbours -------------------------------------------------------------

@dataclass
class VinnPolicy:
    """Memory of (normalised feature, action) pairs queried by kernel-weighted k-NN."""

    embeddings: np.ndarray
    actions: np.ndarray
    k: int
    stats: NormStats
    encoder: EncoderNet | None = None
    exec_horizon: int = field(default=1, init=False)

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        n = self.embeddings.shape[0]
        if self.actions.shape[0] != n:
            raise ShapeError(f"{n} embeddings but {self.actions.shape[0]} actions")
        if n == 0:
            raise UsageError("VINN memory is empty")
        if not 1 <= self.k <= n:
            raise ConfigError(f"k={self.k} must lie in 1..{n} (memory size)")

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def act(self, raw_obs, joint, seed: int = 0) -> np.ndarray:
        query = _features(self, np.asarray(raw_obs), np.asarray(joint))
        return vinn_predict(self, query)[None]

    def save(self, path) -> None:
        cfg = {"kind": "vinn", "k": self.k, "stats_epsilon": repr(self.stats.epsilon)}
        enc_cfg, enc_arrays = _encoder_entries(self.encoder)
        cfg.update(enc_cfg)
        arrays = {"memory.embeddings": self.embeddings, "memory.actions": self.actions, **self.stats.arrays(), **enc_arrays}
        checkpoint.save(path, cfg, arrays)

    @classmethod
    def from_parts(cls, cfg: dict[str, str], arrays: dict[str, np.ndarray]) -> VinnPolicy:
        return cls(
            arrays["memory.embeddings"], arrays["memory.actions"], int(cfg["k"]),
            _stats_from(cfg, arrays), _encoder_from(cfg, arrays),
        )


def build_vinn(windows: Sequence[TrainingWindow], k: int, stats: NormStats, encoder=None) -> VinnPolicy:
    """Memory rows are each window's normalised observation and its first action (environment units)."""
    _check_windows(windows)
    obs, actions = stack_windows(windows)
    return VinnPolicy(obs, stats.denormalize_action(actions[:, 0]), k, stats, encoder)


def squared_distances(memory: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Σ_j (m_ij − q_j)², accumulated coordinate by coordinate in index order."""
    d2 = np.zeros(memory.shape[0])
    for j in range(memory.shape[1]):
        diff = memory[:, j] - query[j]
        d2 += diff * diff
    return d2


def vinn_predict(policy: VinnPolicy, query) -> np.ndarray:
    """exp(−d²)-weighted mean of the k nearest stored actions; ties go to earlier entries."""
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.size != policy.embeddings.shape[1]:
        raise ShapeError(f"query dim {query.size} != memory dim {policy.embeddings.shape[1]}")
    d2 = squared_distances(policy.embeddings, query)
    nearest = np.argsort(d2, kind="stable")[: policy.k]
    weights = np.exp(-d2[nearest])
    if weights.sum() == 0.0:
        # every kernel value underflowed; shifting by the smallest distance keeps the ratios
        weights = np.exp(-(d2[nearest] - d2[nearest[0]]))
    # normalise before mixing so a single neighbour comes back bit-exact
    weights = weights / weights.sum()
    out = np.zeros(policy.action_dim)
    for w, i in zip(weights, nearest):
        out += w * policy.actions[i]
    return out


# checkpoints --------------------------------------------------------------------

POLICY_KINDS = {"diffclone": DiffClonePolicy, "bc": BcPolicy, "vinn": VinnPolicy}


def load_policy(path):
    cfg, arrays = checkpoint.load(path)
    kind = cfg.get("kind")
    if kind not in POLICY_KINDS:
        raise FormatError(f"checkpoint kind {kind!r} is not a policy")
    return POLICY_KINDS[kind].from_parts(cfg, arrays)


# rollouts -----------------------------------------------------------------------

@dataclass
class EpisodeTrace:
    actions: list[np.ndarray] = field(default_factory=list)
    observations: list[np.ndarray] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    chunks: list[np.ndarray] = field(default_factory=list)

    @property
    def inferences(self) -> int:
        return len(self.chunks)


def _execute(env, trace: EpisodeTrace, chunk: np.ndarray, exec_horizon: int, max_steps: int) -> None:
    trace.chunks.append(chunk)
    for action in chunk[:exec_horizon]:
        trace.observations.append(env.observation())
        _, reward, done = env.step(action)
        trace.actions.append(np.asarray(action))
        trace.rewards.append(reward)
        if done or len(trace.actions) >= max_steps:
            return


def receding_horizon_rollout(policy, env, max_steps: int, seed: int) -> EpisodeTrace:
    """Infer a chunk, execute its first ``exec_horizon`` actions, re-observe, repeat."""
    trace = EpisodeTrace()
    while not env.done and len(trace.actions) < max_steps:
        chunk = np.atleast_2d(policy.act(env.observation(), env.joint_state(), derive_seed(seed, trace.inferences)))
        _execute(env, trace, chunk, policy.exec_horizon, max_steps)
    return trace


def batched_rollouts(policy, envs: Sequence, max_steps: int, seeds: Sequence[int]) -> list[EpisodeTrace]:
    """Lockstep rollouts of many environments sharing one batched inference per re-plan."""
    traces = [EpisodeTrace() for _ in envs]
    while True:
        active = [i for i, e in enumerate(envs) if not e.done and len(traces[i].actions) < max_steps]
        if not active:
            return traces
        obs = np.stack([envs[i].observation() for i in active])
        joint = np.stack([envs[i].joint_state() for i in active])
        chunk_seeds = [derive_seed(seeds[i], traces[i].inferences) for i in active]
        chunks = policy.act_batch(obs, joint, chunk_seeds)
        for i, chunk in zip(active, chunks):
            _execute(envs[i], traces[i], chunk, policy.exec_horizon, max_steps)
