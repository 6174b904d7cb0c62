"""Small observation encoders and the self-supervised objectives used to pretrain them.

Three objectives are available: a momentum-contrast InfoNCE loss with a key
queue, a BYOL-style cosine loss against a stop-gradient target, and a
regression from embedding deltas to joint-state deltas.
"""

from __future__ import annotations

import copy
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .dataset import Dataset
from .errors import ConfigError, FormatError, ShapeError, UsageError
from .layers import MLP, Module
from .report import TrainReport
from .tensor import Tensor

log = logging.getLogger("diffclone.encoder")

OBJECTIVES = ("moco", "byol", "delta")
AUG_NOISE = 0.05
AUG_DROPOUT = 0.1


class IdentityEncoder:
    """Passes raw observations through unchanged (the no-encoder ablation)."""

    def __init__(self, dim: int):
        self.in_dim = dim
        self.embed_dim = dim

    def encode(self, raw_obs) -> np.ndarray:
        return np.array(raw_obs, dtype=np.float64)


class EncoderNet(Module):
    """Raw observation vector → embedding through a Mish MLP."""

    def __init__(self, in_dim: int = 7, embed_dim: int = 16, hidden: Sequence[int] = (64,), seed: int = 0):
        self.hidden = tuple(int(h) for h in hidden)
        self.mlp = MLP((in_dim, *self.hidden, embed_dim), np.random.default_rng(seed))
        self.params = self.mlp.params
        self.in_dim = in_dim
        self.embed_dim = embed_dim

    def __call__(self, x) -> Tensor:
        return self.mlp(x)

    def encode(self, raw_obs) -> np.ndarray:
        x = np.asarray(raw_obs, dtype=np.float64)
        with T.no_grad():
            out = self.mlp(np.atleast_2d(x)).data
        return out[0] if x.ndim == 1 else out

    def clone(self) -> EncoderNet:
        return copy.deepcopy(self)

    def config(self) -> dict[str, str]:
        return {
            "encoder_in": str(self.in_dim),
            "encoder_embed": str(self.embed_dim),
            "encoder_hidden": ",".join(map(str, self.hidden)),
        }

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> EncoderNet:
        hidden = tuple(int(h) for h in cfg["encoder_hidden"].split(",") if h)
        return cls(int(cfg["encoder_in"]), int(cfg["encoder_embed"]), hidden)

    def save(self, path) -> None:
        checkpoint.save(path, {"kind": "encoder", **self.config()}, self.state_arrays())

    @classmethod
    def load(cls, path) -> EncoderNet:
        cfg, arrays = checkpoint.load(path)
        if cfg.get("kind") != "encoder":
            raise FormatError(f"checkpoint holds {cfg.get('kind')!r}, not an encoder")
        enc = cls.from_config(cfg)
        enc.load_arrays(arrays)
        return enc


# objectives -------------------------------------------------------------------

def l2_normalize(x: Tensor) -> Tensor:
    norms = T.sqrt(T.tsum(x * x, axis=-1, keepdims=True))
    if np.any(norms.data == 0.0):
        raise UsageError("cannot normalise a zero vector")
    return x / norms


def infonce_loss(q, k_pos, negatives, tau: float) -> Tensor:
    """−log softmax of the positive logit among [positive, negatives], averaged over queries.

    ``q`` and ``k_pos`` are ``[D]`` or ``[N, D]``; ``negatives`` is ``[K, D]``
    (K may be 0) and shared by every query.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    q, k_pos = T.as_tensor(q), T.as_tensor(k_pos)
    if q.ndim == 1:
        q, k_pos = q.reshape(1, -1), k_pos.reshape(1, -1)
    neg = T.as_tensor(negatives)
    D = q.shape[1]
    if neg.size == 0:
        neg = T.as_tensor(np.zeros((0, D)))
    if k_pos.shape != q.shape or neg.ndim != 2 or neg.shape[1] != D:
        raise ShapeError(f"query {q.shape}, positive {k_pos.shape}, negatives {neg.shape} disagree")
    pos = T.tsum(q * k_pos, axis=1, keepdims=True)
    logits = pos if neg.shape[0] == 0 else T.concat([pos, q @ neg.T], axis=1)
    logits = logits / tau
    return T.mean(T.logsumexp(logits, axis=1) - logits[:, 0])


@dataclass
class MocoState:
    target: EncoderNet
    queue: deque = field(default_factory=deque)
    capacity: int = 256
    momentum: float = 0.99
    tau: float = 0.07

    @classmethod
    def create(cls, online: EncoderNet, capacity: int = 256, momentum: float = 0.99, tau: float = 0.07) -> MocoState:
        if capacity < 1:
            raise ConfigError("queue capacity must be ≥ 1")
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {momentum}")
        target = online.clone()
        for p in target.parameters():
            p.requires_grad = False
        return cls(target, deque(maxlen=capacity), capacity, momentum, tau)

    def negatives(self) -> np.ndarray:
        if not self.queue:
            return np.zeros((0, self.target.embed_dim))
        return np.stack(self.queue)


def momentum_update(state: MocoState, online) -> None:
    """target ← m·target + (1−m)·online for every parameter, in place."""
    online_params = online.params if isinstance(online, Module) else online
    target = state.target.params
    if set(online_params) != set(target):
        raise ShapeError("online and target parameter names differ")
    m = state.momentum
    for name, tp in target.items():
        op = online_params[name]
        od = op.data if isinstance(op, Tensor) else np.asarray(op, dtype=np.float64)
        if od.shape != tp.shape:
            raise ShapeError(f"{name}: online {od.shape} vs target {tp.shape}")
        tp.data = m * tp.data + (1.0 - m) * od


def enqueue_keys(state: MocoState, keys) -> None:
    """Append keys oldest-first; the deque drops the oldest beyond capacity."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if keys.size == 0:
        return
    if keys.shape[1] != state.target.embed_dim:
        raise ShapeError(f"key dim {keys.shape[1]} != embedding dim {state.target.embed_dim}")
    for k in keys:
        state.queue.append(k.copy())


def byol_loss(q_pred, z_target) -> Tensor:
    """2 − 2·cos(q, z) with z behind a stop-gradient; rows are averaged when batched."""
    q = T.as_tensor(q_pred)
    z = T.stop_gradient(T.as_tensor(z_target))
    if q.shape != z.shape:
        raise ShapeError(f"prediction {q.shape} and target {z.shape} differ")
    cos = T.tsum(l2_normalize(q) * l2_normalize(z), axis=-1)
    return T.mean(2.0 - 2.0 * cos)


def delta_dynamics_loss(encoder, head, obs_t, obs_t1, state_t, state_t1) -> Tensor:
    """Mean over pairs of ‖head(enc(o_{t+1}) − enc(o_t)) − (s_{t+1} − s_t)‖²."""
    obs_t, obs_t1 = np.atleast_2d(obs_t), np.atleast_2d(obs_t1)
    state_t, state_t1 = np.atleast_2d(state_t), np.atleast_2d(state_t1)
    if obs_t.shape != obs_t1.shape or state_t.shape != state_t1.shape or obs_t.shape[0] != state_t.shape[0]:
        raise ShapeError("observation and state pairs must have matching shapes")
    pred = head(encoder(obs_t1) - encoder(obs_t))
    target = state_t1 - state_t
    if pred.shape != target.shape:
        raise ShapeError(f"head outputs {pred.shape}, state delta is {target.shape}")
    diff = pred - target
    return T.mean(T.tsum(diff * diff, axis=1))


# pretraining ------------------------------------------------------------------

def augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise, then zero each coordinate with probability AUG_DROPOUT."""
    noisy = x + rng.normal(0.0, AUG_NOISE, size=x.shape)
    keep = rng.random(x.shape) >= AUG_DROPOUT
    return noisy * keep


@dataclass
class PretrainResult:
    encoder: EncoderNet
    report: TrainReport
    head: Module | None = None


def _observations(data) -> np.ndarray:
    if isinstance(data, Dataset):
        return np.concatenate([t.obs for t in data])
    return np.atleast_2d(np.asarray(data, dtype=np.float64))


def _pairs(data: Dataset) -> tuple[np.ndarray, ...]:
    o0, o1, s0, s1 = [], [], [], []
    for t in data:
        o0.append(t.obs[:-1]), o1.append(t.obs[1:]), s0.append(t.joint[:-1]), s1.append(t.joint[1:])
    return tuple(np.concatenate(x) for x in (o0, o1, s0, s1))


def pretrain(
    encoder: EncoderNet,
    data,
    objective: str,
    epochs: int,
    seed: int,
    batch_size: int = 64,
    lr: float = 1e-3,
    queue_size: int = 256,
    momentum: float = 0.99,
    tau: float = 0.07,
) -> PretrainResult:
    """Train ``encoder`` in place; returns it with one loss row per epoch.

    ``data`` is a Dataset or, for moco/byol, a plain ``[N, obs_dim]`` array.
    The delta objective needs a Dataset (it reads joint states).
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}; choose from {', '.join(OBJECTIVES)}")
    if epochs < 0 or batch_size < 1:
        raise ConfigError("epochs must be ≥ 0 and batch_size ≥ 1")
    rng = np.random.default_rng(seed)
    report = TrainReport()
    head = None
    if objective == "delta":
        if not isinstance(data, Dataset):
            raise ConfigError("the delta objective needs a trajectory dataset")
        pairs = _pairs(data)
        n = pairs[0].shape[0]
        head = MLP((encoder.embed_dim, 64, data.joint_dim), np.random.default_rng(seed + 1))
        params = encoder.parameters() + head.parameters()
    else:
        obs = _observations(data)
        n = obs.shape[0]
        params = encoder.parameters()
        state = MocoState.create(encoder, queue_size, momentum, tau)
        if objective == "byol":
            head = MLP((encoder.embed_dim, encoder.embed_dim), np.random.default_rng(seed + 1))
            params = params + head.parameters()
    if n == 0:
        raise UsageError("cannot pretrain on an empty dataset")
    opt = T.Adam(params, lr=lr)
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            opt.zero_grad()
            if objective == "delta":
                o0, o1, s0, s1 = (p[idx] for p in pairs)
                loss = delta_dynamics_loss(encoder, head, augment(o0, rng), augment(o1, rng), s0, s1)
            else:
                v1, v2 = augment(obs[idx], rng), augment(obs[idx], rng)
                if objective == "moco":
                    q = l2_normalize(encoder(v1))
                    with T.no_grad():
                        k = l2_normalize(state.target(v2)).data
                    loss = infonce_loss(q, k, state.negatives(), state.tau)
                else:
                    with T.no_grad():
                        z = state.target(v2).data
                    loss = byol_loss(head(encoder(v1)), z)
            loss.backward()
            opt.step()
            if objective != "delta":
                momentum_update(state, encoder)
                if objective == "moco":
                    enqueue_keys(state, k)
            losses.append(loss.item())
        report.add(epoch, float(np.mean(losses)), time.perf_counter() - start)
        log.info("pretrain %s epoch %d loss %.5f", objective, epoch, report.rows[-1][1])
    return PretrainResult(encoder, report, head)


def contrastive_margin(encoder, clusters: Sequence[np.ndarray], seed: int, pairs: int = 200) -> float:
    """Mean cosine of two augmented views of one sample minus that of views from different clusters."""
    rng = np.random.default_rng(seed)
    pos, neg = [], []
    for _ in range(pairs):
        a, b = rng.choice(len(clusters), size=2, replace=False)
        xa = clusters[a][rng.integers(len(clusters[a]))]
        xb = clusters[b][rng.integers(len(clusters[b]))]
        va, va2, vb = (encoder.encode(augment(x[None], rng))[0] for x in (xa, xa, xb))
        cos = lambda u, v: float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
        pos.append(cos(va, va2))
        neg.append(cos(va, vb))
    return float(np.mean(pos) - np.mean(neg))
