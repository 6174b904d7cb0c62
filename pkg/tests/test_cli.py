from __future__ import annotations

import json

import pytest

from diffclone import cli
from diffclone.errors import ConfigError

TINY = [
    "--set", "horizon=4", "--set", "exec_horizon=2", "--set", "channels=4,8", "--set", "norm_groups=2",
    "--set", "time_embed_dim=4", "--set", "cond_hidden=8", "--set", "diffusion_steps=10",
    "--set", "bc_hidden=8", "--set", "batch_size=32",
]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "demos.jsonl"
    assert run("gen-data", "--out", path, "--episodes", 6, "--seed", 1) == 0
    return path


def test_gen_data_is_deterministic(tmp_path, data, capsys):
    again = tmp_path / "again.jsonl"
    assert run("gen-data", "--out", again, "--episodes", 6, "--seed", 1) == 0
    assert data.read_bytes() == again.read_bytes()
    assert "episodes=6" in capsys.readouterr().out


@pytest.mark.parametrize("agent", ["diffclone", "bc", "vinn"])
def test_train_then_eval(tmp_path, data, agent, capsys):
    out = tmp_path / agent
    assert run("train", "--agent", agent, "--data", data, "--out", out, "--epochs", 1, *TINY) == 0
    assert {p.name for p in out.iterdir()} == {"policy.dck", "norm.json", "train_loss.csv", "manifest.json"}
    rows = (out / "train_loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,seconds"
    assert len(rows) == (1 if agent == "vinn" else 2)
    manifest = json.loads((out / "manifest.json").read_text())
    key = "bc_epochs" if agent == "bc" else "epochs"
    assert manifest["config"][key] == "1" and str(data) in manifest["inputs"]
    metrics = tmp_path / f"{agent}.csv"
    assert run("eval", "--checkpoint", out / "policy.dck", "--episodes", 2, "--out", metrics) == 0
    assert "success_rate=" in capsys.readouterr().out
    assert len(metrics.read_text().splitlines()) == 3


def test_eval_expert_is_perfect(capsys):
    assert run("eval", "--agent", "expert", "--episodes", 5) == 0
    assert "success_rate=100%" in capsys.readouterr().out


def test_pretrain_and_train_with_encoder(tmp_path, data):
    enc = tmp_path / "enc"
    assert run("pretrain", "--data", data, "--out", enc, "--objective", "byol", "--epochs", 1) == 0
    assert len((enc / "pretrain_loss.csv").read_text().splitlines()) == 2
    out = tmp_path / "vinn"
    assert run("train", "--agent", "vinn", "--data", data, "--out", out, "--encoder", enc / "encoder.dck") == 0
    assert run("eval", "--checkpoint", out / "policy.dck", "--episodes", 1) == 0


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--agent", "gpt", "--data", "x", "--out", "y"],
        ["eval"],
        ["diag", "nope"],
        ["eval", "--agent", "expert", "--set", "bogus=1"],
        ["eval", "--agent", "expert", "--set", "epochs=many"],
        ["eval", "--agent", "expert", "--set", "exec_horizon=32"],
        ["eval", "--agent", "expert", "--config", "/no/such/file"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    assert "usage error" in capsys.readouterr().err


def test_malformed_flags_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--epochs", "x"])
    assert exc.value.code == 2


def test_missing_data_exits_1(tmp_path, capsys):
    assert run("train", "--agent", "bc", "--data", tmp_path / "none.jsonl", "--out", tmp_path / "o") == 1
    assert "error" in capsys.readouterr().err


def test_corrupted_checkpoint_exits_1(tmp_path, data, capsys):
    out = tmp_path / "bc"
    assert run("train", "--agent", "bc", "--data", data, "--out", out, "--epochs", 1, *TINY) == 0
    ck = out / "policy.dck"
    blob = bytearray(ck.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    ck.write_bytes(bytes(blob))
    assert run("eval", "--checkpoint", ck) == 1
    assert "CorruptionError" in capsys.readouterr().err


def test_action_dim_mismatch_exits_1(tmp_path, data):
    out = tmp_path / "bc"
    assert run("train", "--agent", "bc", "--data", data, "--out", out, "--epochs", 1, *TINY) == 0
    assert run("eval", "--checkpoint", out / "policy.dck", "--set", "action_dim=3") == 1


def test_config_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nepochs = 7\nlr=0.5\n")
    cfg = cli.resolve_config([cli.parse_config_text(path.read_text()), {"epochs": "9"}])
    assert cfg.epochs == 9 and cfg.lr == 0.5
    with pytest.raises(ConfigError):
        cli.parse_config_text("just words")


@pytest.mark.parametrize("name", ["schedule", "gradcheck"])
def test_diag_commands_pass(name, tmp_path, capsys):
    out = tmp_path / "diag.txt"
    assert run("diag", name, "--out", out) == 0
    text = capsys.readouterr().out
    assert f"diag {name}: PASS" in text
    assert out.read_text().splitlines() == text.splitlines()[:-1]


def test_log_level_env(monkeypatch):
    monkeypatch.setenv("DIFFCLONE_LOG", "loud")
    assert cli.main(["eval", "--agent", "zero", "--episodes", "1"]) == 2
