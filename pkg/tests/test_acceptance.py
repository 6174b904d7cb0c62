"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

from __future__ import annotations

import math
import time

import numpy as np

from diffclone import cli, sim
from diffclone import dataset as D
from diffclone import encoder as E
from diffclone import policies as P
from diffclone import tensor as T
from diffclone.diagnostics import gradcheck_checks, run_bimodal, run_constant, run_moco_margin, schedule_checks
from diffclone.rng import derive_seed
from oracles import top_fraction_oracle, vinn_brute_force


def verdict(name: str, ok: bool, detail: str) -> None:
    print(f"{name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def test_ac01_gradcheck():
    t0 = time.perf_counter()
    checks = gradcheck_checks(points=3)
    secs = time.perf_counter() - t0
    ok = all(c.passed for c in checks) and secs < 60
    verdict("AC01 gradcheck", ok, " ".join(f"{c.name}={c.value:.2e}" for c in checks) + f" seconds={secs:.1f}")


def test_ac02_schedule():
    checks = schedule_checks(50)
    verdict("AC02 schedule", all(c.passed for c in checks), " ".join(f"{c.name}={c.value:.3g}" for c in checks))


def test_ac03_normalization_round_trip():
    rng = np.random.default_rng(0)
    n = 1000
    obs = rng.standard_normal((n, 7)) * [1, 50, 1e-3, 1, 1, 7, 1] + [0, 3, 0, 1, 1, -5, 0]
    obs[:, 4] = 1.0  # constant column: std floors
    joint = np.zeros((n, 7))
    actions = rng.standard_normal((n, 7)) * 0.05
    actions[:, 3:] = 0.0
    ds = D.Dataset(7, 7, 7, [D.Trajectory("a", obs, joint, actions, np.zeros(n))])
    stats = D.compute_norm_stats(ds)
    floored = int(np.sum(stats.obs_std == D.STD_FLOOR) + np.sum(stats.act_std == D.STD_FLOOR))
    feats = np.hstack([obs, joint])
    err_obs = np.max(np.abs(stats.denormalize_obs(stats.normalize_obs(feats)) - feats))
    err_act = np.max(np.abs(stats.denormalize_action(stats.normalize_action(actions)) - actions))
    worst = max(err_obs, err_act)
    verdict("AC03 normalize", worst <= 1e-9 and floored > 0, f"max_abs_err={worst:.2e} floored_dims={floored}")


def test_ac04_constant_action():
    t0 = time.perf_counter()
    frac = run_constant((0.5, -0.3), seed=0)
    secs = time.perf_counter() - t0
    verdict("AC04 constant", frac >= 0.95 and secs < 300, f"frac_within_0.05={frac:.3f} seconds={secs:.1f}")


def test_ac05_bimodal():
    t0 = time.perf_counter()
    r = run_bimodal(seed=0)
    secs = time.perf_counter() - t0
    ok = all(c.passed for c in r.checks()) and secs < 600
    detail = (
        f"near_plus={r.near_plus:.3f} near_minus={r.near_minus:.3f} near_zero={r.near_zero:.3f} "
        f"bc={r.bc_prediction:+.3f} seconds={secs:.1f}"
    )
    verdict("AC05 bimodal", ok, detail)


POUR_DC = P.DiffCloneConfig(horizon=16, exec_horizon=8, diffusion_steps=50, batch_size=128, lr=1e-4, epochs=100)
POUR_BC = P.BcConfig(batch_size=128)


def pour_seed(seed: int) -> tuple[float, float]:
    env = sim.EnvConfig()
    ds = sim.generate_dataset(env, 200, (0.0, 0.05, 0.1), seed)
    ds = D.subsample_dataset(D.filter_high_reward(ds, top_fraction=0.5), 1)
    stats = D.compute_norm_stats(ds)
    eval_seed = derive_seed(seed, "eval")
    dc, _ = P.train_diffclone(D.dataset_windows(ds, POUR_DC.horizon, stats), POUR_DC, seed, stats)
    bc, _ = P.train_bc(D.dataset_windows(ds, 1, stats), POUR_BC, seed, stats)
    return sim.evaluate(dc, env, 50, eval_seed).success_rate, sim.evaluate(bc, env, 50, eval_seed).success_rate


def test_ac06_pouring_end_to_end():
    t0 = time.perf_counter()
    results = [pour_seed(s) for s in (0, 1, 2)]
    secs = time.perf_counter() - t0
    ordered = all(dc >= bc for dc, bc in results)
    floors = sum(dc >= 80.0 for dc, _ in results)
    ok = ordered and floors >= 2 and secs < 1800
    per_seed = " ".join(f"seed{s}:dc={dc:.0f}%,bc={bc:.0f}%" for s, (dc, bc) in enumerate(results))
    verdict("AC06 pouring", ok, f"{per_seed} dc>=bc_all={ordered} dc>=80%_seeds={floors} seconds={secs:.0f}")


def test_ac07_vinn_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(100):
        n, dim, adim = int(rng.integers(1, 80)), int(rng.integers(1, 8)), int(rng.integers(1, 4))
        memory, actions = rng.standard_normal((n, dim)), rng.standard_normal((n, adim))
        k = int(rng.integers(1, n + 1))
        stats = D.NormStats(np.zeros(dim), np.ones(dim), np.zeros(adim), np.ones(adim))
        q = rng.standard_normal(dim)
        got = P.vinn_predict(P.VinnPolicy(memory, actions, k, stats), q)
        mismatches += got.tobytes() != vinn_brute_force(memory, actions, q, k).tobytes()
        nearest = int(np.argmin(np.sum((memory - q) ** 2, axis=1)))
        mismatches += not np.array_equal(P.vinn_predict(P.VinnPolicy(memory, actions, 1, stats), q), actions[nearest])
    verdict("AC07 vinn", mismatches == 0, f"cases=100 mismatches={mismatches}")


def test_ac08_filtering():
    rng = np.random.default_rng(8)
    failures = 0
    for case in range(300):
        n = int(rng.integers(1, 40))
        totals = rng.integers(0, 6, n).astype(float)
        trajs = []
        for i in range(n):
            reward = np.zeros(2)
            reward[1] = totals[i]
            trajs.append(D.Trajectory(f"t{i:03d}", np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1)), reward))
        ds = D.Dataset(1, 1, 1, trajs)
        tau = float(rng.integers(0, 6))
        want_thr = [t.id for t in trajs if t.total_reward >= tau]
        try:
            got_thr = [t.id for t in D.filter_high_reward(ds, threshold=tau)]
        except D.EmptySelectionError:
            got_thr = []
        q = float(rng.integers(1, 101)) / 100
        want_top = [f"t{i:03d}" for i in top_fraction_oracle(list(totals), q)]
        got_top = [t.id for t in D.filter_high_reward(ds, top_fraction=q)]
        failures += (got_thr != want_thr) + (got_top != want_top) + (len(got_top) != math.ceil(q * n - 1e-9))
    verdict("AC08 filtering", failures == 0, f"cases=300 failures={failures}")


def test_ac09_encoder_objectives():
    rng = np.random.default_rng(9)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    zero_neg = E.infonce_loss(q, k, np.zeros((0, 8)), 0.07).item()
    K = 16
    uniform = E.infonce_loss(q, k, np.tile(k, (K, 1)), 0.07).item()
    anti = E.byol_loss(q, -q).item()
    qt = T.Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    zt = T.Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    E.byol_loss(qt, zt).backward()
    target_grad_zero = bool(np.all(zt.grad == 0.0))
    _, margin = run_moco_margin(seed=0)
    ok = (
        zero_neg == 0.0
        and abs(uniform - math.log(K + 1)) <= 1e-12
        and abs(anti - 4.0) <= 1e-12
        and target_grad_zero
        and margin >= 0.2
    )
    detail = (
        f"infonce_zero_neg={zero_neg:g} uniform_err={abs(uniform - math.log(K + 1)):.1e} "
        f"byol_anti={anti:.15g} target_grad_zero={target_grad_zero} moco_margin={margin:.3f}"
    )
    verdict("AC09 encoder", ok, detail)


def pipeline(root) -> dict[str, bytes]:
    tiny = [
        "--set", "horizon=4", "--set", "exec_horizon=2", "--set", "channels=8,16", "--set", "norm_groups=4",
        "--set", "time_embed_dim=8", "--set", "cond_hidden=16", "--set", "diffusion_steps=20",
    ]
    data, run, metrics = root / "demos.jsonl", root / "run", root / "metrics.csv"
    assert cli.main(["gen-data", "--out", str(data), "--episodes", "12", "--seed", "3"]) == 0
    assert cli.main(["train", "--agent", "diffclone", "--data", str(data), "--out", str(run), "--epochs", "2", "--seed", "3", *tiny]) == 0
    assert cli.main(["eval", "--checkpoint", str(run / "policy.dck"), "--episodes", "3", "--seed", "3", "--out", str(metrics), *tiny]) == 0
    loss_rows = [line.rsplit(",", 1)[0] for line in (run / "train_loss.csv").read_text().splitlines()]
    return {
        "dataset": data.read_bytes(),
        "checkpoint": (run / "policy.dck").read_bytes(),
        "norm": (run / "norm.json").read_bytes(),
        "metrics": metrics.read_bytes(),
        "train_loss_without_seconds": "\n".join(loss_rows).encode(),
    }


def test_ac10_cli_reproducibility(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    differing = [k for k in a if a[k] != b[k]]
    verdict("AC10 reproducible", not differing, f"artifacts={len(a)} differing={differing or 'none'}")
