"""FiLM-conditioned 1D U-Net that predicts the noise added to an action window.

The window ``[H, action_dim]`` is treated as ``action_dim`` channels over a
temporal axis of length H. Each resolution level holds one residual block;
every block is modulated by a per-channel scale/shift computed from the
conditioning vector (observation ⊕ sinusoidal step embedding).

Layout for channel widths ``[c0, c1]``::

    down0: block(A→c0) @H      → skip0 → stride-2 conv → H/2
    down1: block(c0→c1) @H/2   → skip1 → stride-2 conv → H/4
    mid:   block(c1→c1) @H/4
    up1:   upsample, concat skip1, block(2·c1→c1) @H/2
    up0:   upsample, concat skip0, block(c1+c0→c0) @H
    head:  conv, Mish, 1×1 conv → A
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .layers import Module, fan_in_uniform
from .schedule import square_cosine_schedule
from .tensor import Tensor

FILM_SCALE_INIT = 1.0
PARAMETERIZATIONS = ("v", "eps")


@dataclass(frozen=True)
class DenoiserConfig:
    action_dim: int = 7
    horizon: int = 16
    channels: tuple[int, ...] = (32, 64)
    kernel_size: int = 3
    norm_groups: int = 4
    obs_dim: int = 10
    obs_horizon: int = 1
    time_embed_dim: int = 32
    cond_hidden: int = 64
    diffusion_steps: int = 50
    parameterization: str = "v"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def cond_dim(self) -> int:
        return self.obs_dim * self.obs_horizon + self.time_embed_dim

    def validate(self) -> None:
        if min(self.action_dim, self.horizon, self.obs_dim, self.obs_horizon, self.cond_hidden) < 1:
            raise ConfigError("dimensions must be positive")
        if not self.channels or min(self.channels) < 1:
            raise ConfigError("need at least one positive channel width")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"parameterization must be one of {PARAMETERIZATIONS}, got {self.parameterization!r}")
        if self.diffusion_steps < 1:
            raise ConfigError("diffusion_steps must be ≥ 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError(f"time embedding dim must be even, got {self.time_embed_dim}")
        for c in self.channels:
            if c % self.norm_groups:
                raise ConfigError(f"width {c} not divisible by {self.norm_groups} norm groups")
        # every level halves the length, the bottleneck included
        factor = 2**self.levels
        if self.horizon % factor:
            raise ConfigError(
                f"horizon {self.horizon} not divisible by 2^{self.levels}={factor} "
                f"for {self.levels} levels"
            )

    def to_dict(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> DenoiserConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name == "channels":
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.name == "parameterization":
                kwargs[f.name] = raw
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, sin/cos interleaved at geometric frequencies.

    ``t`` may be a scalar (returns ``[dim]``) or an array (returns ``[..., dim]``).
    """
    if dim < 2 or dim % 2:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = np.asarray(t, dtype=np.float64)[..., None] * freqs
    emb = np.empty(angles.shape[:-1] + (dim,))
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb


class DenoiserNet(Module):
    def __init__(self, config: DenoiserConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    def __call__(self, noisy_actions, t, obs) -> Tensor:
        return forward(self, noisy_actions, t, obs)

    def predict_noise(self, x: np.ndarray, t, obs: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return forward(self, x, t, obs).data

    def save(self, path) -> None:
        cfg = {"kind": "denoiser", **self.config.to_dict()}
        checkpoint.save(path, cfg, self.state_arrays())

    @classmethod
    def load(cls, path) -> DenoiserNet:
        cfg, arrays = checkpoint.load(path)
        if cfg.get("kind") != "denoiser":
            raise FormatError(f"checkpoint holds {cfg.get('kind')!r}, not a denoiser")
        net = build(DenoiserConfig.from_dict(cfg), 0)
        net.load_arrays(arrays)
        return net


# construction -----------------------------------------------------------------

def _conv(p, rng, name, c_out, c_in, k):
    p[f"{name}.w"] = fan_in_uniform(rng, (c_out, c_in, k), c_in * k)
    p[f"{name}.b"] = fan_in_uniform(rng, (c_out,), c_in * k)


def _norm(p, name, c):
    p[f"{name}.scale"] = Tensor(np.ones(c), requires_grad=True)
    p[f"{name}.shift"] = Tensor(np.zeros(c), requires_grad=True)


def _block(p, rng, name, c_in, c_out, cfg: DenoiserConfig):
    k = cfg.kernel_size
    _conv(p, rng, f"{name}.conv1", c_out, c_in, k)
    _norm(p, f"{name}.gn1", c_out)
    film_w = fan_in_uniform(rng, (cfg.cond_hidden, 2 * c_out), cfg.cond_hidden)
    film_b = fan_in_uniform(rng, (2 * c_out,), cfg.cond_hidden)
    film_b.data[:c_out] += FILM_SCALE_INIT  # scale half starts near identity
    p[f"{name}.film.w"] = film_w
    p[f"{name}.film.b"] = film_b
    _conv(p, rng, f"{name}.conv2", c_out, c_out, k)
    _norm(p, f"{name}.gn2", c_out)
    if c_in != c_out:
        _conv(p, rng, f"{name}.res", c_out, c_in, 1)


def build(config: DenoiserConfig, init_seed: int) -> DenoiserNet:
    """Initialise every parameter with fan-in scaled uniform draws."""
    config.validate()
    rng = np.random.default_rng(init_seed)
    cfg, ch, k = config, config.channels, config.kernel_size
    p: dict[str, Tensor] = {}
    p["cond.w"] = fan_in_uniform(rng, (cfg.cond_dim, cfg.cond_hidden), cfg.cond_dim)
    p["cond.b"] = fan_in_uniform(rng, (cfg.cond_hidden,), cfg.cond_dim)
    c_prev = cfg.action_dim
    for i, c in enumerate(ch):
        _block(p, rng, f"down{i}", c_prev, c, cfg)
        _conv(p, rng, f"down{i}.pool", c, c, k)
        c_prev = c
    _block(p, rng, "mid", ch[-1], ch[-1], cfg)
    c_prev = ch[-1]
    for i in reversed(range(cfg.levels)):
        _block(p, rng, f"up{i}", c_prev + ch[i], ch[i], cfg)
        c_prev = ch[i]
    _conv(p, rng, "head.conv", ch[0], ch[0], k)
    _conv(p, rng, "head.out", cfg.action_dim, ch[0], 1)
    return DenoiserNet(config, p)


# forward --------------------------------------------------------------------

def _film_params(p, name, cond_h: Tensor, c: int):
    gb = cond_h @ p[f"{name}.film.w"] + p[f"{name}.film.b"]
    gb = gb.reshape(gb.shape[0], 1, 2 * c)
    return gb[:, :, :c], gb[:, :, c:]


def _run_block(net: DenoiserNet, name: str, x: Tensor, cond_h: Tensor | None) -> Tensor:
    p, cfg = net.params, net.config
    pad = cfg.kernel_size // 2
    c_out = p[f"{name}.conv1.b"].shape[0]
    h = T.conv1d(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], padding=pad, channels_last=True)
    h = T.group_norm(h, cfg.norm_groups, p[f"{name}.gn1.scale"], p[f"{name}.gn1.shift"], channels_last=True)
    if cond_h is not None:
        gamma, beta = _film_params(p, name, cond_h, c_out)
        h = gamma * h + beta
    h = T.mish(h)
    h = T.conv1d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], padding=pad, channels_last=True)
    h = T.group_norm(h, cfg.norm_groups, p[f"{name}.gn2.scale"], p[f"{name}.gn2.shift"], channels_last=True)
    h = T.mish(h)
    if f"{name}.res.w" in p:
        res = T.conv1d(x, p[f"{name}.res.w"], p[f"{name}.res.b"], channels_last=True)
    else:
        res = x
    return h + res


def _batchify(noisy_actions, t, obs, cfg: DenoiserConfig):
    x = T.as_tensor(noisy_actions)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3 or x.shape[1:] != (cfg.horizon, cfg.action_dim):
        raise ShapeError(f"expected action window [{cfg.horizon}, {cfg.action_dim}], got {x.shape}")
    B = x.shape[0]
    obs = np.asarray(obs.data if isinstance(obs, Tensor) else obs, dtype=np.float64)
    obs = obs.reshape(B, -1) if obs.size == B * cfg.obs_dim * cfg.obs_horizon else obs
    if obs.shape != (B, cfg.obs_dim * cfg.obs_horizon):
        raise ShapeError(
            f"expected {B} observations of dim {cfg.obs_dim * cfg.obs_horizon}, got {obs.shape}"
        )
    steps = np.broadcast_to(np.asarray(t), (B,))
    return x, single, obs, steps


def _v_to_eps(v: Tensor, x: Tensor, steps: np.ndarray, n_steps: int) -> Tensor:
    """ε̂ = √ᾱ_t·v + √(1−ᾱ_t)·x_t.

    With the raw output read as v = √ᾱ·ε − √(1−ᾱ)·x0 this is an exact identity,
    and at the noisiest step (ᾱ≈0) it returns x_t itself, so the reverse step
    does not amplify network error there.
    """
    if steps.min() < 1 or steps.max() > n_steps:
        raise ShapeError(f"diffusion steps must lie in 1..{n_steps}")
    ab = square_cosine_schedule(n_steps).alpha_bar[steps].reshape(-1, 1, 1)
    return v * np.sqrt(ab) + x * np.sqrt(1.0 - ab)


def forward(net: DenoiserNet, noisy_actions, t, obs, *, conditioned: bool = True, skip_scale: float = 1.0) -> Tensor:
    """Predicted noise with the same shape as ``noisy_actions``.

    The head's raw output is mapped to ε̂ according to ``config.parameterization``.
    ``conditioned=False`` skips FiLM modulation entirely and ``skip_scale``
    multiplies every skip connection; both exist for structural tests.
    """
    cfg, p = net.config, net.params
    x, single, obs, steps = _batchify(noisy_actions, t, obs, cfg)
    cond = np.concatenate([obs, time_embedding(steps, cfg.time_embed_dim)], axis=1)
    cond_h = T.mish(Tensor(cond) @ p["cond.w"] + p["cond.b"]) if conditioned else None
    pad = cfg.kernel_size // 2

    # activations stay [B, L, C] throughout
    h = x
    skips = []
    for i in range(cfg.levels):
        h = _run_block(net, f"down{i}", h, cond_h)
        skips.append(h)
        h = T.conv1d(h, p[f"down{i}.pool.w"], p[f"down{i}.pool.b"], stride=2, padding=pad, channels_last=True)
    h = _run_block(net, "mid", h, cond_h)
    for i in reversed(range(cfg.levels)):
        h = T.upsample_nearest(h, 2, axis=1)
        skip = skips[i] if skip_scale == 1.0 else skips[i] * skip_scale
        h = _run_block(net, f"up{i}", T.concat([h, skip], axis=2), cond_h)
    # no normalisation in the head: at high noise the output must track the input's scale
    h = T.conv1d(h, p["head.conv.w"], p["head.conv.b"], padding=pad, channels_last=True)
    h = T.conv1d(T.mish(h), p["head.out.w"], p["head.out.b"], channels_last=True)
    if cfg.parameterization == "v":
        h = _v_to_eps(h, x, steps, cfg.diffusion_steps)
    return h.reshape(cfg.horizon, cfg.action_dim) if single else h
