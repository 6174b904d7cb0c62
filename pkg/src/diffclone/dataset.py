"""Trajectory storage, high-reward filtering, normalisation and horizon windows."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from .errors import (
    ConfigError,
    CorruptionError,
    EmptySelectionError,
    FormatError,
    ShapeError,
    UsageError,
)

TRAJ_FORMAT = "diffclone-traj"
NORM_FORMAT = "diffclone-norm"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6


class ObservationEncoder(Protocol):
    embed_dim: int

    def encode(self, raw_obs: np.ndarray) -> np.ndarray: ...


@dataclass
class Trajectory:
    """One episode stored column-wise: row j of each array is time step j."""

    id: str
    obs: np.ndarray
    joint: np.ndarray
    action: np.ndarray
    reward: np.ndarray

    def __post_init__(self):
        self.obs = np.atleast_2d(np.asarray(self.obs, dtype=np.float64))
        self.joint = np.atleast_2d(np.asarray(self.joint, dtype=np.float64))
        self.action = np.atleast_2d(np.asarray(self.action, dtype=np.float64))
        self.reward = np.asarray(self.reward, dtype=np.float64).reshape(-1)
        n = self.reward.size
        if n < 1:
            raise ShapeError(f"trajectory {self.id!r} has no steps")
        for name in ("obs", "joint", "action"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ShapeError(f"trajectory {self.id!r}: {name} has shape {arr.shape}, expected {n} rows")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError(f"trajectory {self.id!r} has non-finite rewards")

    def __len__(self) -> int:
        return self.reward.size

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.reward))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.id == other.id and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("obs", "joint", "action", "reward")
        )


@dataclass
class Dataset:
    obs_dim: int
    joint_dim: int
    action_dim: int
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        for traj in self.trajectories:
            self.check(traj)

    def check(self, traj: Trajectory) -> None:
        dims = (traj.obs.shape[1], traj.joint.shape[1], traj.action.shape[1])
        if dims != (self.obs_dim, self.joint_dim, self.action_dim):
            raise ShapeError(
                f"trajectory {traj.id!r} has (obs, joint, action) dims {dims}, "
                f"dataset expects {(self.obs_dim, self.joint_dim, self.action_dim)}"
            )

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def replace(self, trajectories: Sequence[Trajectory]) -> Dataset:
        return Dataset(self.obs_dim, self.joint_dim, self.action_dim, list(trajectories))

    @property
    def num_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)


# persistence ----------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def dumps(dataset: Dataset) -> str:
    header = {
        "format": TRAJ_FORMAT,
        "version": FORMAT_VERSION,
        "obs_dim": dataset.obs_dim,
        "joint_dim": dataset.joint_dim,
        "action_dim": dataset.action_dim,
    }
    lines = [_dump(header)]
    for traj in dataset.trajectories:
        steps = [
            {"obs": o, "joint": j, "action": a, "reward": r}
            for o, j, a, r in zip(
                traj.obs.tolist(), traj.joint.tolist(), traj.action.tolist(), traj.reward.tolist()
            )
        ]
        lines.append(_dump({"id": traj.id, "steps": steps}))
    return "".join(line + "\n" for line in lines)


def save(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps(dataset), encoding="utf-8", newline="\n")


def _parse_record(line: str, lineno: int, dims: tuple[int, int, int]) -> Trajectory:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"line {lineno}: truncated or malformed record ({exc.msg})") from exc
    if not isinstance(rec, dict) or "id" not in rec or "steps" not in rec:
        raise CorruptionError(f"line {lineno}: record lacks 'id' or 'steps'")
    tid = str(rec["id"])
    steps = rec["steps"]
    if not isinstance(steps, list) or not steps:
        raise CorruptionError(f"trajectory {tid!r}: no steps")
    cols: dict[str, list] = {"obs": [], "joint": [], "action": [], "reward": []}
    for k, step in enumerate(steps):
        try:
            for key, dim in zip(("obs", "joint", "action"), dims):
                vec = step[key]
                if len(vec) != dim:
                    raise CorruptionError(
                        f"trajectory {tid!r} step {k}: {key} has {len(vec)} entries, header declares {dim}"
                    )
                cols[key].append(vec)
            cols["reward"].append(float(step["reward"]))
        except (KeyError, TypeError) as exc:
            raise CorruptionError(f"trajectory {tid!r} step {k}: missing or malformed field") from exc
    try:
        return Trajectory(tid, cols["obs"], cols["joint"], cols["action"], cols["reward"])
    except (ValueError, TypeError) as exc:
        raise CorruptionError(f"trajectory {tid!r}: {exc}") from exc


def loads(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        # last line lacks its terminator: the writer never produces that
        raise CorruptionError(f"line {len(lines)}: truncated record (no trailing newline)")
    if not lines:
        raise FormatError("empty trajectory file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError("first line is not a JSON header") from exc
    if not isinstance(header, dict) or header.get("format") != TRAJ_FORMAT:
        raise FormatError(f"not a {TRAJ_FORMAT} file")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported version {header.get('version')!r}")
    try:
        dims = (int(header["obs_dim"]), int(header["joint_dim"]), int(header["action_dim"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("header lacks dimension fields") from exc
    trajs = [_parse_record(line, i + 2, dims) for i, line in enumerate(lines[1:])]
    return Dataset(*dims, trajs)


def load(path: str | Path) -> Dataset:
    return loads(Path(path).read_text(encoding="utf-8"))


# selection --------------------------------------------------------------------

def filter_high_reward(
    dataset: Dataset, threshold: float | None = None, top_fraction: float | None = None
) -> Dataset:
    """Keep high-return episodes, scored by total reward.

    ``threshold`` keeps every trajectory whose total is ≥ threshold.
    ``top_fraction`` keeps the ⌈q·N⌉ best, ties broken by ascending id.
    Survivors keep their original relative order.
    """
    if (threshold is None) == (top_fraction is None):
        raise ConfigError("give exactly one of threshold or top_fraction")
    if not len(dataset):
        raise UsageError("cannot filter an empty dataset")
    trajs = dataset.trajectories
    if threshold is not None:
        keep = [t for t in trajs if t.total_reward >= threshold]
        setting = f"threshold={threshold}"
    else:
        if not 0.0 < top_fraction <= 1.0:
            raise ConfigError(f"top_fraction must lie in (0, 1], got {top_fraction}")
        n_keep = math.ceil(round(top_fraction * len(trajs), 9))
        ranked = sorted(range(len(trajs)), key=lambda i: (-trajs[i].total_reward, trajs[i].id))
        chosen = set(ranked[:n_keep])
        keep = [t for i, t in enumerate(trajs) if i in chosen]
        setting = f"top_fraction={top_fraction}"
    if not keep:
        raise EmptySelectionError(f"high-reward filter ({setting}) selected no trajectories")
    return dataset.replace(keep)


def subsample(traj: Trajectory, period: int) -> Trajectory:
    """Keep steps 0, period, 2·period, ..."""
    if period < 1:
        raise ConfigError(f"sub-sampling period must be ≥ 1, got {period}")
    s = slice(None, None, period)
    return Trajectory(traj.id, traj.obs[s], traj.joint[s], traj.action[s], traj.reward[s])


def subsample_dataset(dataset: Dataset, period: int) -> Dataset:
    return dataset.replace([subsample(t, period) for t in dataset])


# normalisation ----------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray
    epsilon: float = STD_FLOOR

    def normalize_obs(self, x) -> np.ndarray:
        return normalize(x, self.obs_mean, self.obs_std)

    def denormalize_obs(self, z) -> np.ndarray:
        return denormalize(z, self.obs_mean, self.obs_std)

    def normalize_action(self, a) -> np.ndarray:
        return normalize(a, self.act_mean, self.act_std)

    def denormalize_action(self, z) -> np.ndarray:
        return denormalize(z, self.act_mean, self.act_std)

    def to_json(self) -> str:
        doc = {
            "format": NORM_FORMAT,
            "version": FORMAT_VERSION,
            "epsilon": self.epsilon,
            "obs_mean": self.obs_mean.tolist(),
            "obs_std": self.obs_std.tolist(),
            "act_mean": self.act_mean.tolist(),
            "act_std": self.act_std.tolist(),
        }
        return _dump(doc) + "\n"

    @classmethod
    def from_json(cls, text: str) -> NormStats:
        doc = json.loads(text)
        if doc.get("format") != NORM_FORMAT or doc.get("version") != FORMAT_VERSION:
            raise FormatError("not a diffclone-norm v1 sidecar")
        return cls(
            *(np.asarray(doc[k], dtype=np.float64) for k in ("obs_mean", "obs_std", "act_mean", "act_std")),
            epsilon=float(doc["epsilon"]),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "stats.obs_mean": self.obs_mean,
            "stats.obs_std": self.obs_std,
            "stats.act_mean": self.act_mean,
            "stats.act_std": self.act_std,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], epsilon: float = STD_FLOOR) -> NormStats:
        return cls(
            arrays["stats.obs_mean"], arrays["stats.obs_std"],
            arrays["stats.act_mean"], arrays["stats.act_std"], epsilon,
        )


def normalize(x, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != mean.shape:
        raise ShapeError(f"vector dim {x.shape[-1:]} does not match stats dim {mean.shape}")
    return (x - mean) / std


def denormalize(z, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1:] != mean.shape:
        raise ShapeError(f"vector dim {z.shape[-1:]} does not match stats dim {mean.shape}")
    return z * std + mean


def observation_features(raw_obs, joint, encoder: ObservationEncoder | None = None) -> np.ndarray:
    """encode(raw_obs) ⊕ joint_state, row-wise."""
    raw_obs = np.asarray(raw_obs, dtype=np.float64)
    emb = raw_obs if encoder is None else np.asarray(encoder.encode(raw_obs))
    return np.concatenate([emb, np.asarray(joint, dtype=np.float64)], axis=-1)


def _column_stats(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = np.sqrt(np.mean((x - mean) ** 2, axis=0))
    return mean, np.maximum(std, eps)


def compute_norm_stats(
    dataset: Dataset, encoder: ObservationEncoder | None = None, eps: float = STD_FLOOR
) -> NormStats:
    """Population mean/std per dimension over every step, std floored at ``eps``."""
    if not len(dataset) or dataset.num_steps == 0:
        raise UsageError("cannot compute statistics of an empty dataset")
    feats = np.concatenate([observation_features(t.obs, t.joint, encoder) for t in dataset])
    acts = np.concatenate([t.action for t in dataset])
    obs_mean, obs_std = _column_stats(feats, eps)
    act_mean, act_std = _column_stats(acts, eps)
    return NormStats(obs_mean, obs_std, act_mean, act_std, eps)


# windows ----------------------------------------------------------------------

@dataclass
class TrainingWindow:
    obs: np.ndarray
    actions: np.ndarray
    pad_count: int


def make_windows(
    traj: Trajectory,
    H: int,
    stats: NormStats,
    encoder: ObservationEncoder | None = None,
    obs_horizon: int = 1,
) -> list[TrainingWindow]:
    """One window per step: normalised observation(s) plus the next H normalised actions.

    Past the episode end the final action is repeated; ``pad_count`` says how
    many entries were filled that way. With ``obs_horizon`` > 1 the latest
    observations are stacked oldest first, repeating step 0 before the start.
    """
    if H < 1:
        raise ConfigError(f"horizon must be ≥ 1, got {H}")
    if obs_horizon < 1:
        raise ConfigError(f"observation horizon must be ≥ 1, got {obs_horizon}")
    feats = observation_features(traj.obs, traj.joint, encoder)
    if feats.shape[1] != stats.obs_mean.size:
        raise ConfigError(
            f"encoded observation dim {feats.shape[1]} does not match stats dim {stats.obs_mean.size}"
        )
    obs_n = stats.normalize_obs(feats)
    act_n = stats.normalize_action(traj.action)
    n = len(traj)
    windows = []
    for i in range(n):
        idx = np.minimum(np.arange(i, i + H), n - 1)
        hist = np.maximum(np.arange(i - obs_horizon + 1, i + 1), 0)
        windows.append(TrainingWindow(obs_n[hist].reshape(-1), act_n[idx], max(0, i + H - n)))
    return windows


def dataset_windows(
    dataset: Dataset,
    H: int,
    stats: NormStats,
    encoder: ObservationEncoder | None = None,
    obs_horizon: int = 1,
) -> list[TrainingWindow]:
    return [w for t in dataset for w in make_windows(t, H, stats, encoder, obs_horizon)]


def stack_windows(windows: Sequence[TrainingWindow]) -> tuple[np.ndarray, np.ndarray]:
    """``([N, obs_dim], [N, H, action_dim])`` arrays for batched training."""
    if not windows:
        raise UsageError("no training windows")
    return np.stack([w.obs for w in windows]), np.stack([w.actions for w in windows])
