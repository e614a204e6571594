"""Command-line contract: exit codes, outputs and round trips."""

import csv
import json
import os
import subprocess
from pathlib import Path

import pytest

CLI = os.environ.get("NETREN_CLI", "netren")
CONFIGS = Path(os.environ.get("NETREN_CONFIG_DIR", Path(__file__).resolve().parents[2] / "configs"))


def run(*args, cwd=None):
    return subprocess.run([CLI, *map(str, args)], capture_output=True, text=True, cwd=cwd)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


def small_vehicle_config(tmp_path):
    cfg = json.loads((CONFIGS / "benchmark-4-vehicles.json").read_text())
    cfg["controller"].update({"state_dim": 4, "neurons": 4})
    cfg["training"].update({"horizon": 20, "samples": 2, "epochs": 4, "checkpoint_every": 2})
    return write_config(tmp_path / "small.json", cfg)


def test_gains_two_node(tmp_path):
    r = run("gains", "--config", CONFIGS / "two-node.json", "--out", tmp_path)
    assert r.returncode == 0, r.stdout + r.stderr
    g = json.loads((tmp_path / "gains.json").read_text())
    assert [a["gamma"] for a in g["agents"]] == pytest.approx([0.5, 0.5], abs=1e-12)
    assert g["lmi"]["feasible"]
    assert "LMI max eigenvalue" in r.stdout


def test_gains_single_node(tmp_path):
    r = run("gains", "--config", CONFIGS / "single-node.json", "--out", tmp_path)
    assert r.returncode == 0
    g = json.loads((tmp_path / "gains.json").read_text())
    assert g["agents"][0]["gamma"] == pytest.approx(2.0, abs=1e-12)


def test_invalid_config_exit_code():
    r = run("gains", "--config", CONFIGS / "invalid-two-node.json")
    assert r.returncode == 2
    err = json.loads(r.stdout)
    assert err["error"] == "validation"
    conditions = {v["condition"] for v in err["violations"]}
    assert {"a", "b"} <= conditions


def test_missing_config_exit_code(tmp_path):
    r = run("simulate", "--config", tmp_path / "nope.json")
    assert r.returncode == 2
    assert json.loads(r.stdout)["error"] == "config"
    assert run("simulate").returncode == 2


def test_certify(tmp_path):
    r = run("certify", "--config", CONFIGS / "benchmark-4-vehicles.json", "--out", tmp_path, "--quiet")
    assert r.returncode == 0
    c = json.loads((tmp_path / "certificate.json").read_text())
    assert c["lmi"]["feasible"]
    assert len(c["lmi"]["matrix"]) == c["lmi"]["size"]


def test_divergence_exit_code(tmp_path):
    cfg = json.loads((CONFIGS / "single-node.json").read_text())
    cfg["plant"]["self"] = 3.0
    cfg["training"]["horizon"] = 60
    path = write_config(tmp_path / "unstable.json", cfg)
    r = run("simulate", "--config", path, "--out", tmp_path)
    assert r.returncode == 3
    err = json.loads(r.stdout)
    assert err["error"] == "divergence"
    assert err["time"] > 0


def test_zero_noise_simulation(tmp_path):
    r = run("simulate", "--config", CONFIGS / "benchmark-4-vehicles.json", "--zero-noise", "--out", tmp_path,
            "--horizon", "50")
    assert r.returncode == 0
    rows = read_csv(tmp_path / "rollout.csv")
    assert rows[0][:3] == ["t", "x[0].p.x", "x[0].p.y"]
    assert len(rows) == 52
    for row in rows[1:]:
        assert all(float(v) == 0.0 for v in row[1:])
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["head_energy"] == 0.0


def test_seeded_simulation_repeats(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        r = run("simulate", "--config", CONFIGS / "benchmark-4-vehicles.json", "--seed", 5, "--samples", 2,
                "--out", d, "--horizon", 40)
        assert r.returncode == 0
        outs.append(d)
    for name in ["rollout_0.csv", "rollout_1.csv", "summary_0.json", "summary_1.json"]:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "rollout_0.csv").read_bytes() != (outs[0] / "rollout_1.csv").read_bytes()


def test_train_smoke_and_resume(tmp_path):
    cfg = small_vehicle_config(tmp_path)
    one = tmp_path / "one"
    r = run("train", "--config", cfg, "--epochs", 1, "--out", one, "--debug-certify", "--quiet")
    assert r.returncode == 0, r.stdout
    cert = json.loads((one / "certification.json").read_text())
    assert cert["lmi"]["feasible"]
    assert cert["max_epoch_eigenvalue"] <= 1e-8

    full = tmp_path / "full"
    assert run("train", "--config", cfg, "--out", full, "--quiet").returncode == 0
    history = read_csv(full / "loss_history.csv")
    assert history[0] == ["epoch", "loss"]
    assert len(history) == 1 + 4
    assert (full / "checkpoint_epoch_00002.json").exists()
    assert (full / "checkpoint_epoch_00004.json").exists()
    gains = read_csv(full / "gain_history.csv")
    assert gains[0] == ["epoch", "gamma[0]", "gamma[1]", "gamma[2]", "gamma[3]"]

    resumed = tmp_path / "resumed"
    r = run("train", "--config", cfg, "--checkpoint", full / "checkpoint_epoch_00002.json", "--out", resumed,
            "--quiet")
    assert r.returncode == 0, r.stdout
    assert read_csv(resumed / "loss_history.csv") == history
    a = json.loads((full / "checkpoint.json").read_text())
    b = json.loads((resumed / "checkpoint.json").read_text())
    assert a["params"] == b["params"]

    # A checkpoint from another configuration is refused.
    other = json.loads(cfg.read_text())
    other["loss"]["formation"]["weight"] = 2.0
    other_path = write_config(tmp_path / "other.json", other)
    r = run("train", "--config", other_path, "--checkpoint", full / "checkpoint.json", "--out", tmp_path / "x")
    assert r.returncode == 2

    # The trained checkpoint drives simulate, gains and export.
    r = run("simulate", "--config", cfg, "--checkpoint", full / "checkpoint.json", "--out", tmp_path / "sim")
    assert r.returncode == 0
    assert run("gains", "--config", cfg, "--checkpoint", full / "checkpoint.json", "--quiet").returncode == 0
    exp = tmp_path / "export"
    r = run("export", "--config", cfg, "--checkpoint", full / "checkpoint.json", "--out", exp, "--samples", 2)
    assert r.returncode == 0
    for name in ["interconnection.json", "gains.json", "scene.json", "trajectory_0.csv", "trajectory_1.csv",
                 "loss_history.csv", "gain_history.csv"]:
        assert (exp / name).exists(), name
    scene = json.loads((exp / "scene.json").read_text())
    assert len(scene["references"]) == 4
    spec = json.loads((exp / "interconnection.json").read_text())
    assert len(spec["M_vz"]) == sum(a["q"] for a in spec["agents"])


def test_seeded_training_repeats(tmp_path):
    cfg = small_vehicle_config(tmp_path)
    for k in range(2):
        assert run("train", "--config", cfg, "--epochs", 2, "--out", tmp_path / f"r{k}", "--quiet").returncode == 0
    assert (tmp_path / "r0" / "loss_history.csv").read_bytes() == (tmp_path / "r1" / "loss_history.csv").read_bytes()
