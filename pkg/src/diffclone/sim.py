"""Deterministic 2D pouring toy with a bimodal scripted expert.

A gripper starts on the left of a vertical wall and must carry a container
around the wall, either over the top or under the bottom, to a cup on the
right, then tilt it. Tilting past the pour threshold moves one particle per
step into the cup when the gripper is inside the cup radius, and onto the
floor otherwise. Reward is 1 for every particle that lands in the cup.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, Trajectory
from .errors import ConfigError, ShapeError, UsageError
from .rng import derive_seed

OBS_DIM = 7
JOINT_DIM = 3
ACTIVE_ACTION_DIMS = 3


@dataclass(frozen=True)
class EnvConfig:
    bound: float = 1.0
    wall_x: float = 0.0
    wall_half_height: float = 0.3
    source: tuple[float, float] = (-0.8, 0.0)
    target: tuple[float, float] = (0.8, 0.0)
    target_radius: float = 0.12
    particles: int = 10
    max_steps: int = 80
    action_dim: int = 3
    action_limit: float = 0.08
    pour_tilt: float = 1.0
    tilt_limit: float = math.pi / 2
    success_fraction: float = 0.9
    start_jitter: float = 0.05

    def validate(self) -> None:
        if self.particles < 1:
            raise ConfigError("need at least one particle")
        if self.action_dim < ACTIVE_ACTION_DIMS:
            raise ConfigError(f"action_dim must be ≥ {ACTIVE_ACTION_DIMS}")
        for px, py in (self.source, self.target):
            if abs(px) > self.bound or abs(py) > self.bound:
                raise ConfigError("source and target must lie inside the arena")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be ≥ 1")


def paper_profile() -> EnvConfig:
    """Seven-dimensional actions; dims 3..6 are accepted and ignored."""
    return EnvConfig(action_dim=7)


@dataclass(frozen=True)
class EnvState:
    x: float
    y: float
    tilt: float
    remaining: int
    delivered: int = 0
    spilled: int = 0
    step_index: int = 0
    done: bool = False


def observe(config: EnvConfig, state: EnvState) -> np.ndarray:
    tx, ty = config.target
    return np.array([
        state.x, state.y, math.sin(state.tilt), math.cos(state.tilt),
        state.remaining / config.particles, tx - state.x, ty - state.y,
    ])


def joint_state(state: EnvState) -> np.ndarray:
    return np.array([state.x, state.y, state.tilt])


def reset(config: EnvConfig, seed: int) -> tuple[EnvState, np.ndarray]:
    config.validate()
    rng = np.random.default_rng(seed)
    sx, sy = config.source
    y = sy + rng.uniform(-config.start_jitter, config.start_jitter)
    state = EnvState(x=sx, y=y, tilt=0.0, remaining=config.particles)
    return state, observe(config, state)


def hits_wall(config: EnvConfig, x0: float, y0: float, x1: float, y1: float) -> bool:
    """Does the axis-aligned segment (x0,y0)→(x1,y1) touch the wall segment?"""
    w, h = config.wall_x, config.wall_half_height
    if y0 == y1:
        return abs(y0) <= h and min(x0, x1) <= w <= max(x0, x1)
    if x0 == x1:
        return x0 == w and min(y0, y1) <= h and max(y0, y1) >= -h
    raise ValueError("only axis-aligned moves are checked")


def step(config: EnvConfig, state: EnvState, action) -> tuple[EnvState, float, bool]:
    if state.done:
        raise UsageError("episode is over; reset before stepping again")
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.size != config.action_dim:
        raise ShapeError(f"action has {a.size} entries, env expects {config.action_dim}")
    lim = config.action_limit
    dx, dy, dtilt = (float(v) for v in np.clip(a[:ACTIVE_ACTION_DIMS], -lim, lim))
    b = config.bound
    x, y = state.x, state.y
    nx = min(max(x + dx, -b), b)
    if hits_wall(config, x, y, nx, y):
        nx = x
    ny = min(max(y + dy, -b), b)
    if hits_wall(config, nx, y, nx, ny):
        ny = y
    tilt = min(max(state.tilt + dtilt, -config.tilt_limit), config.tilt_limit)
    remaining, delivered, spilled = state.remaining, state.delivered, state.spilled
    reward = 0.0
    if abs(tilt) >= config.pour_tilt and remaining > 0:
        remaining -= 1
        tx, ty = config.target
        if math.hypot(nx - tx, ny - ty) <= config.target_radius:
            delivered += 1
            reward = 1.0
        else:
            spilled += 1
    step_index = state.step_index + 1
    done = remaining == 0 or step_index >= config.max_steps
    new = EnvState(nx, ny, tilt, remaining, delivered, spilled, step_index, done)
    return new, reward, done


class PouringEnv:
    """Stateful wrapper over ``reset``/``step`` for rollouts."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.state: EnvState | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.state, obs = reset(self.config, seed)
        return obs

    def observation(self) -> np.ndarray:
        return observe(self.config, self.state)

    def joint_state(self) -> np.ndarray:
        return joint_state(self.state)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        self.state, reward, done = step(self.config, self.state, action)
        return self.observation(), reward, done

    @property
    def done(self) -> bool:
        return self.state.done


# expert -------------------------------------------------------------------------

DETOUR_Y = 0.55
EXPERT_SPEED = 0.07
POUR_TARGET_TILT = 1.2
ARRIVE_TOL = 0.03
POUR_RADIUS = 0.06
PRETILT_RADIUS = 0.4
PRETILT = 0.8


def scripted_expert(
    state: EnvState,
    mode: str,
    noise_scale: float,
    rng: np.random.Generator,
    config: EnvConfig | None = None,
) -> np.ndarray:
    """Waypoint controller: detour over (left) or under (right) the wall, go to the cup, pour."""
    config = config or EnvConfig()
    if mode not in ("left", "right"):
        raise ConfigError(f"mode must be 'left' or 'right', got {mode!r}")
    detour = (config.wall_x, DETOUR_Y if mode == "left" else -DETOUR_Y)
    tx, ty = config.target
    to_cup = math.hypot(state.x - tx, state.y - ty)
    if state.x < config.wall_x - ARRIVE_TOL:
        wx, wy = detour
    else:
        wx, wy = tx, ty
    vx, vy = wx - state.x, wy - state.y
    dist = math.hypot(vx, vy)
    if dist > EXPERT_SPEED:
        vx, vy = vx / dist * EXPERT_SPEED, vy / dist * EXPERT_SPEED
    # pre-tilt on the final approach, pour only over the cup
    if to_cup <= POUR_RADIUS:
        tilt_goal = POUR_TARGET_TILT
    elif to_cup <= PRETILT_RADIUS:
        tilt_goal = PRETILT
    else:
        tilt_goal = 0.0
    lim = config.action_limit
    dtilt = min(max(tilt_goal - state.tilt, -lim), lim)
    action = np.zeros(config.action_dim)
    action[:ACTIVE_ACTION_DIMS] = (vx, vy, dtilt)
    if noise_scale > 0:
        action[:ACTIVE_ACTION_DIMS] += rng.normal(0.0, noise_scale, ACTIVE_ACTION_DIMS)
    return action


def run_expert_episode(
    config: EnvConfig, mode: str, noise_scale: float, env_seed: int, rng: np.random.Generator, traj_id: str
) -> Trajectory:
    state, obs = reset(config, env_seed)
    rows: dict[str, list] = {"obs": [], "joint": [], "action": [], "reward": []}
    lim = config.action_limit
    while not state.done:
        action = scripted_expert(state, mode, noise_scale, rng, config)
        action[:ACTIVE_ACTION_DIMS] = np.clip(action[:ACTIVE_ACTION_DIMS], -lim, lim)
        rows["obs"].append(obs)
        rows["joint"].append(joint_state(state))
        rows["action"].append(action)
        state, reward, _ = step(config, state, action)
        rows["reward"].append(reward)
        obs = observe(config, state)
    return Trajectory(traj_id, rows["obs"], rows["joint"], rows["action"], rows["reward"])


def generate_dataset(
    config: EnvConfig,
    n_episodes: int,
    noise_levels: Sequence[float] = (0.0, 0.05, 0.1),
    seed: int = 0,
    path: str | Path | None = None,
) -> Dataset:
    """Expert demonstrations alternating modes and cycling noise levels.

    Episode e uses mode ``left`` for even e, ``right`` for odd e, and noise
    level ``noise_levels[e % len(noise_levels)]``. Recorded actions are the
    clipped actions the environment executed.
    """
    if n_episodes < 1:
        raise ConfigError("need at least one episode")
    if not noise_levels:
        raise ConfigError("need at least one noise level")
    config.validate()
    trajs = []
    for e in range(n_episodes):
        mode = "left" if e % 2 == 0 else "right"
        noise = float(noise_levels[e % len(noise_levels)])
        rng = np.random.default_rng(derive_seed(seed, "expert", e))
        trajs.append(run_expert_episode(config, mode, noise, derive_seed(seed, "env", e), rng, f"ep{e:05d}"))
    ds = Dataset(OBS_DIM, JOINT_DIM, config.action_dim, trajs)
    if path is not None:
        from .dataset import save

        save(ds, path)
    return ds


class ExpertPolicy:
    """The scripted expert behind the rollout interface (one action per inference)."""

    exec_horizon = 1
    obs_horizon = 1

    def __init__(self, config: EnvConfig | None = None, mode: str = "left", noise_scale: float = 0.0):
        self.config = config or EnvConfig()
        self.mode = mode
        self.noise_scale = noise_scale

    def act(self, raw_obs, joint, seed: int) -> np.ndarray:
        x, y, tilt = (float(v) for v in np.asarray(joint).reshape(-1)[:3])
        remaining = int(round(float(np.asarray(raw_obs).reshape(-1)[4]) * self.config.particles))
        state = EnvState(x, y, tilt, remaining)
        rng = np.random.default_rng(seed)
        return scripted_expert(state, self.mode, self.noise_scale, rng, self.config)[None]


class ZeroPolicy:
    exec_horizon = 1
    obs_horizon = 1

    def __init__(self, action_dim: int = 3):
        self.action_dim = action_dim

    def act(self, raw_obs, joint, seed: int) -> np.ndarray:
        return np.zeros((1, self.action_dim))


# evaluation ---------------------------------------------------------------------

@dataclass
class EpisodeResult:
    episode: int
    total_reward: float
    success: bool
    steps: int
    delivered: int
    inferences: int
    actions: np.ndarray = field(repr=False, default=None)
    observations: np.ndarray = field(repr=False, default=None)


@dataclass
class EvalSummary:
    mean_reward: float
    success_rate: float
    episodes: list[EpisodeResult]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "reward", "success", "steps"])
            for r in self.episodes:
                w.writerow([r.episode, repr(float(r.total_reward)), int(r.success), r.steps])

    def summary_line(self) -> str:
        return f"mean_reward={self.mean_reward:.4g} success_rate={self.success_rate:.4g}%"


def _episode_seeds(seed: int, episode: int) -> tuple[int, int]:
    return derive_seed(seed, "env", episode), derive_seed(seed, "policy", episode)


def _result(config: EnvConfig, episode: int, env: PouringEnv, trace) -> EpisodeResult:
    total = float(np.sum(trace.rewards)) if trace.rewards else 0.0
    success = env.state.delivered >= config.success_fraction * config.particles
    return EpisodeResult(
        episode, total, bool(success), len(trace.actions), env.state.delivered, trace.inferences,
        np.asarray(trace.actions), np.asarray(trace.observations),
    )


def _evaluate_range(policy, config: EnvConfig, episodes: Sequence[int], seed: int) -> list[EpisodeResult]:
    from .policies import batched_rollouts, receding_horizon_rollout

    envs, policy_seeds = [], []
    for e in episodes:
        env_seed, pol_seed = _episode_seeds(seed, e)
        env = PouringEnv(config)
        env.reset(env_seed)
        envs.append(env)
        policy_seeds.append(pol_seed)
    if hasattr(policy, "act_batch"):
        traces = batched_rollouts(policy, envs, config.max_steps, policy_seeds)
    else:
        traces = [receding_horizon_rollout(policy, env, config.max_steps, s) for env, s in zip(envs, policy_seeds)]
    return [_result(config, e, env, tr) for e, env, tr in zip(episodes, envs, traces)]


def evaluate(policy, config: EnvConfig, n_episodes: int, seed: int, jobs: int = 1) -> EvalSummary:
    """Roll out ``n_episodes`` receding-horizon episodes and aggregate reward and success."""
    if n_episodes < 1:
        raise ConfigError("need at least one evaluation episode")
    config.validate()
    episodes = list(range(n_episodes))
    if jobs > 1:
        parts = [episodes[i::jobs] for i in range(jobs) if episodes[i::jobs]]
        with ProcessPoolExecutor(max_workers=len(parts)) as pool:
            futures = [pool.submit(_evaluate_range, policy, config, part, seed) for part in parts]
            results = sorted((r for f in futures for r in f.result()), key=lambda r: r.episode)
    else:
        results = _evaluate_range(policy, config, episodes, seed)
    mean_reward = float(np.mean([r.total_reward for r in results]))
    success_rate = 100.0 * sum(r.success for r in results) / n_episodes
    return EvalSummary(mean_reward, success_rate, results)
