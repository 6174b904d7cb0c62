"""``diffclone`` command line: gen-data, pretrain, train, eval, diag.

Settings come from a flat ``key=value`` config file (``--config``), then
``--set key=value`` overrides, then dedicated flags; later sources win.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as D
from . import diagnostics, sim
from .encoder import OBJECTIVES, EncoderNet, pretrain
from .errors import ConfigError, DiffCloneError, UsageError
from .policies import (
    BcConfig,
    DiffCloneConfig,
    build_vinn,
    load_policy,
    train_bc,
    train_diffclone,
)
from .report import TrainReport
from .rng import derive_seed

log = logging.getLogger("diffclone")

AGENTS = ("diffclone", "bc", "vinn")
EVAL_AGENTS = ("expert", "zero")
DIAGNOSTICS = ("gradcheck", "schedule", "bimodal")
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


@dataclass
class RunConfig:
    seed: int = 0
    # data generation and environment
    episodes: int = 200
    noise_levels: str = "0,0.05,0.1"
    action_dim: int = 7
    particles: int = 10
    max_steps: int = 80
    # preprocessing
    top_fraction: float = 0.5
    reward_threshold: str = ""
    subsample_period: int = 1
    # diffusion policy
    horizon: int = 16
    exec_horizon: int = 8
    diffusion_steps: int = 50
    batch_size: int = 128
    lr: float = 1e-4
    epochs: int = 100
    channels: str = "32,64"
    kernel_size: int = 3
    norm_groups: int = 4
    time_embed_dim: int = 32
    cond_hidden: int = 64
    ema_decay: float = 0.0
    # baselines
    bc_hidden: str = "256,256"
    bc_horizon: int = 1
    bc_lr: float = 1e-3
    bc_epochs: int = 100
    vinn_k: int = 5
    # encoder
    encoder: str = ""
    objective: str = "moco"
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-3
    embed_dim: int = 16
    # evaluation
    eval_episodes: int = 50
    jobs: int = 1

    def validate(self) -> None:
        if self.episodes < 1 or self.eval_episodes < 1:
            raise ConfigError("episodes and eval_episodes must be ≥ 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be ≥ 1")
        if self.subsample_period < 1:
            raise ConfigError("subsample_period must be ≥ 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {', '.join(OBJECTIVES)}")
        self.env_config().validate()
        self.diffclone_config().validate()
        self.bc_config().validate()
        _floats(self.noise_levels, "noise_levels")

    def env_config(self) -> sim.EnvConfig:
        return sim.EnvConfig(action_dim=self.action_dim, particles=self.particles, max_steps=self.max_steps)

    def diffclone_config(self) -> DiffCloneConfig:
        return DiffCloneConfig(
            horizon=self.horizon, exec_horizon=self.exec_horizon, diffusion_steps=self.diffusion_steps,
            batch_size=self.batch_size, lr=self.lr, epochs=self.epochs,
            channels=_ints(self.channels, "channels"), kernel_size=self.kernel_size,
            norm_groups=self.norm_groups, time_embed_dim=self.time_embed_dim,
            cond_hidden=self.cond_hidden, ema_decay=self.ema_decay,
        )

    def bc_config(self) -> BcConfig:
        return BcConfig(
            hidden=_ints(self.bc_hidden, "bc_hidden"), horizon=self.bc_horizon,
            batch_size=self.batch_size, lr=self.bc_lr, epochs=self.bc_epochs,
        )

    def as_text(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}


def _ints(text: str, name: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{name} must be comma-separated integers, got {text!r}") from exc


def _floats(text: str, name: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{name} must be comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise ConfigError(f"{name} is empty")
    return vals


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(sources: list[dict[str, str]]) -> RunConfig:
    """Merge key=value sources left to right into a validated RunConfig."""
    known = {f.name: f for f in fields(RunConfig)}
    kwargs = {}
    for src in sources:
        for key, value in src.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kind = type(known[key].default)
            try:
                kwargs[key] = kind(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from exc
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


# helpers -------------------------------------------------------------------------

def file_digest(path: str | Path) -> str:
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=16).hexdigest()


def write_manifest(path: Path, command: str, cfg: RunConfig, inputs: list[str], outputs: list[str]) -> None:
    """Snapshot of the resolved run, written before any training starts."""
    doc = {
        "command": command,
        "config": cfg.as_text(),
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": outputs,
        "versions": {"diffclone": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_encoder(cfg: RunConfig):
    return EncoderNet.load(cfg.encoder) if cfg.encoder else None


def prepare_dataset(cfg: RunConfig, data_path: str) -> D.Dataset:
    """filter → subsample, as used by ``train``."""
    ds = D.load(data_path)
    if cfg.reward_threshold:
        ds = D.filter_high_reward(ds, threshold=float(cfg.reward_threshold))
    else:
        ds = D.filter_high_reward(ds, top_fraction=cfg.top_fraction)
    return D.subsample_dataset(ds, cfg.subsample_period)


# commands ------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    env = cfg.env_config()
    ds = sim.generate_dataset(env, cfg.episodes, _floats(cfg.noise_levels, "noise_levels"), cfg.seed, args.out)
    rewards = np.array([t.total_reward for t in ds])
    q = np.quantile(rewards, [0.0, 0.25, 0.5, 0.75, 1.0])
    print(f"episodes={len(ds)} steps={ds.num_steps} reward_quartiles=" + ",".join(f"{v:g}" for v in q))
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    ds = D.load(args.data)
    write_manifest(out / "manifest.json", "pretrain", cfg, [args.data], ["encoder.dck", "pretrain_loss.csv"])
    enc = EncoderNet(ds.obs_dim, cfg.embed_dim, seed=derive_seed(cfg.seed, "init"))
    result = pretrain(enc, ds, cfg.objective, cfg.pretrain_epochs, derive_seed(cfg.seed, "shuffle"), lr=cfg.pretrain_lr)
    enc.save(out / "encoder.dck")
    result.report.write_csv(out / "pretrain_loss.csv")
    print(f"objective={cfg.objective} epochs={cfg.pretrain_epochs} final_loss={_last(result.report.losses)}")
    return 0


def _last(values) -> str:
    return f"{values[-1]:.6g}" if values else "nan"


def cmd_train(args, cfg: RunConfig) -> int:
    agent = args.agent
    if agent not in AGENTS:
        raise UsageError(f"unknown agent {agent!r}; valid agents: {', '.join(AGENTS)}")
    out = _out_dir(args.out)
    inputs = [args.data] + ([cfg.encoder] if cfg.encoder else [])
    outputs = ["policy.dck", "norm.json", "train_loss.csv"]
    write_manifest(out / "manifest.json", f"train --agent {agent}", cfg, inputs, outputs)
    encoder = _load_encoder(cfg)
    ds = prepare_dataset(cfg, args.data)
    stats = D.compute_norm_stats(ds, encoder)
    (out / "norm.json").write_text(stats.to_json(), encoding="utf-8", newline="\n")
    log.info("training %s on %d trajectories (%d steps)", agent, len(ds), ds.num_steps)
    if agent == "diffclone":
        windows = D.dataset_windows(ds, cfg.horizon, stats, encoder)
        policy, report = train_diffclone(windows, cfg.diffclone_config(), cfg.seed, stats, encoder)
    elif agent == "bc":
        windows = D.dataset_windows(ds, cfg.bc_horizon, stats, encoder)
        policy, report = train_bc(windows, cfg.bc_config(), cfg.seed, stats, encoder)
    else:
        windows = D.dataset_windows(ds, 1, stats, encoder)
        policy = build_vinn(windows, cfg.vinn_k, stats, encoder)
        report = TrainReport()
    policy.save(out / "policy.dck")
    report.write_csv(out / "train_loss.csv")
    print(f"agent={agent} windows={len(windows)} epochs={len(report)} final_loss={_last(report.losses)}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    env = cfg.env_config()
    if args.checkpoint:
        policy = load_policy(args.checkpoint)
        if policy.action_dim != env.action_dim:
            raise ConfigError(
                f"checkpoint acts in {policy.action_dim} dims but the environment expects {env.action_dim}"
            )
    elif args.agent == "expert":
        policy = sim.ExpertPolicy(env)
    elif args.agent == "zero":
        policy = sim.ZeroPolicy(env.action_dim)
    else:
        raise UsageError("eval needs --checkpoint or --agent expert|zero")
    summary = sim.evaluate(policy, env, cfg.eval_episodes, derive_seed(cfg.seed, "eval"), cfg.jobs)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        summary.write_csv(out)
    print(summary.summary_line())
    return 0


def cmd_diag(args, cfg: RunConfig) -> int:
    name = args.name
    if name == "gradcheck":
        checks = diagnostics.gradcheck_checks(args.points)
    elif name == "schedule":
        checks = diagnostics.schedule_checks(args.T if args.T is not None else cfg.diffusion_steps)
    else:
        result = diagnostics.run_bimodal(cfg.seed)
        checks = result.checks()
    lines = [c.line() for c in checks]
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")
    for line in lines:
        print(line)
    ok = all(c.passed for c in checks)
    print(f"diag {name}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffclone", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required: bool):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)
        return p

    p = common(sub.add_parser("gen-data", help="generate expert demonstrations"), True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--noise-levels", dest="noise_levels")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("pretrain", help="pretrain an observation encoder"), True)
    p.add_argument("--data", required=True)
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--epochs", type=int, dest="pretrain_epochs")
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("train", help="train an agent"), True)
    p.add_argument("--agent", required=True, help=f"one of {', '.join(AGENTS)}")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--encoder")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint in the pouring environment"), False)
    p.add_argument("--checkpoint")
    p.add_argument("--agent", choices=EVAL_AGENTS)
    p.add_argument("--episodes", type=int, dest="eval_episodes")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("diag", help="run a built-in diagnostic"), False)
    p.add_argument("name", help=f"one of {', '.join(DIAGNOSTICS)}")
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--points", type=int, default=3)
    p.set_defaults(func=cmd_diag)
    return parser


def _flag_overrides(args) -> dict[str, str]:
    keys = ("seed", "episodes", "noise_levels", "epochs", "pretrain_epochs", "eval_episodes", "jobs", "encoder", "objective")
    out = {k: str(getattr(args, k)) for k in keys if getattr(args, k, None) is not None}
    if getattr(args, "agent", None) == "bc" and "epochs" in out:
        # --epochs always means the epochs of the agent being trained
        out["bc_epochs"] = out.pop("epochs")
    return out


def configure_logging() -> None:
    level_name = os.environ.get("DIFFCLONE_LOG", "info").lower()
    if level_name not in LOG_LEVELS:
        raise UsageError(f"DIFFCLONE_LOG must be one of {', '.join(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on malformed flags
    try:
        configure_logging()
        if args.command == "diag" and args.name not in DIAGNOSTICS:
            raise UsageError(f"unknown diagnostic {args.name!r}; choose from {', '.join(DIAGNOSTICS)}")
        sources = []
        if args.config:
            sources.append(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        sources.append(parse_config_text("\n".join(args.set)))
        sources.append(_flag_overrides(args))
        cfg = resolve_config(sources)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DiffCloneError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
