import json

import numpy as np
import pytest

from fklab.cli import main


def run_cli(args):
    return main(args)


def write_cfg(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


TOY_MODEL = {
    "kind": "toy", "dim": 6, "base": 0.7, "ratio": 0.8,
    "kick_dim": 6, "kick_b0": 0.3, "rho": 1.0,
}


def test_eigen_two_state_example(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path,
        {
            "kernel": {
                "points": [[0.0], [1.0]],
                "P": [[0.5, 0.5], [0.5, 0.5]],
                "A": [0, 1],
                "V": [0.0, float(np.log(2.0))],
            },
            "seed": 1,
        },
    )
    out = tmp_path / "out"
    assert run_cli(["eigen", "--config", cfg, "--out", str(out)]) == 0
    assert "lambda = 1.5" in capsys.readouterr().out
    results = json.loads((out / "results.json").read_text())
    assert results["lambda"] == pytest.approx(1.5, abs=1e-9)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1
    assert len(manifest["config_sha256"]) == 64


def test_pressure_zero_potential(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path,
        {"model": TOY_MODEL, "potential": {"kind": "zero"},
         "u0": [0, 0, 0, 0, 0, 0], "k_max": 30, "n_traj": 500, "seed": 3},
    )
    out = tmp_path / "out"
    assert run_cli(["pressure", "--config", cfg, "--out", str(out)]) == 0
    results = json.loads((out / "results.json").read_text())
    assert results["Q"] == pytest.approx(0.0, abs=1e-12)


def test_missing_config_exits_2(tmp_path, capsys):
    assert run_cli(["eigen", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_malformed_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli(["eigen", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_incomplete_config_exits_2(tmp_path):
    cfg = write_cfg(tmp_path, {"seed": 1})
    assert run_cli(["eigen", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_simulate_writes_trajectory(tmp_path):
    cfg = write_cfg(
        tmp_path,
        {"model": TOY_MODEL, "u0": [0.5] * 6, "K": 50, "stream": 2, "seed": 11},
    )
    out = tmp_path / "out"
    assert run_cli(["simulate", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "trajectory.csv").read_text().strip().split("\n")
    assert rows[0].startswith("# config_sha256=")
    assert rows[1].startswith("step,")
    assert len(rows) == 53


def test_conditions_on_kernel(tmp_path):
    cfg = write_cfg(
        tmp_path,
        {
            "kernel": {
                "points": [[0.0], [1.0], [3.0]],
                "P": [[0.6, 0.4, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]],
                "A": [0, 1],
            },
            "params": {"r": 0.5, "c": 0.5, "k_max": 40},
            "seed": 2,
        },
    )
    out = tmp_path / "out"
    assert run_cli(["conditions", "--config", cfg, "--out", str(out)]) == 0
    rep = json.loads((out / "results.json").read_text())["kernel_conditions"]
    assert rep["concentration"]["verdict"] == "fail"
    assert rep["expbound"]["verdict"] == "pass"


def test_reproducible_across_thread_counts(tmp_path):
    cfg = write_cfg(
        tmp_path,
        {
            "model": TOY_MODEL,
            "potential": {"kind": "coordinate", "index": 0, "scale": 1.0, "clip": 2.0},
            "u0": [0] * 6,
            "k_max": 30,
            "n_traj": 400,
            "alphas": [-0.4, -0.2, 0.2, 0.4],
            "recenter_k": 1000,
            "seed": 13,
        },
    )
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run_cli(["pressure", "--config", cfg, "--out", str(out1), "--threads", "1"]) == 0
    assert run_cli(["pressure", "--config", cfg, "--out", str(out2), "--threads", "4"]) == 0
    for name in ("results.json", "manifest.json", "pressure_curve.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_seed_override_changes_manifest(tmp_path):
    cfg = write_cfg(
        tmp_path,
        {"model": TOY_MODEL, "u0": [0.2] * 6, "K": 10, "seed": 5},
    )
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert run_cli(["simulate", "--config", cfg, "--out", str(out1)]) == 0
    assert run_cli(["simulate", "--config", cfg, "--out", str(out2), "--seed", "99"]) == 0
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["seed"] == 5 and m2["seed"] == 99
    assert (out1 / "trajectory.csv").read_bytes() != (out2 / "trajectory.csv").read_bytes()


def test_coupling_check_command(tmp_path):
    cfg = write_cfg(
        tmp_path,
        {"model": TOY_MODEL, "N": 3, "n_samples": 50_000, "delta": 0.12, "seed": 4},
    )
    out = tmp_path / "out"
    assert run_cli(["coupling-check", "--config", cfg, "--out", str(out)]) == 0
    res = json.loads((out / "results.json").read_text())
    assert abs(res["z_score"]) < 4
    assert min(res["ks_pvalues"]) > 1e-3


def test_attract_command(tmp_path):
    cfg = write_cfg(
        tmp_path,
        {"model": TOY_MODEL, "eps": 0.3, "n_traj": 300, "horizon": 150,
         "cloud_k": 30, "cloud_points": 2000, "hit_eps": 0.5, "seed": 6},
    )
    out = tmp_path / "out"
    assert run_cli(["attract", "--config", cfg, "--out", str(out)]) == 0
    res = json.loads((out / "results.json").read_text())
    assert res["attraction"]["delta"] > 0
    assert res["hitting"]["delta"] > 0


def test_slln_command(tmp_path):
    cfg = write_cfg(
        tmp_path,
        {"model": TOY_MODEL,
         "potential": {"kind": "coordinate", "index": 0, "scale": 1.0, "clip": 2.0},
         "u0": [0] * 6, "n_traj": 300, "K": 400, "eps": 0.1, "C": 0.5, "seed": 8},
    )
    out = tmp_path / "out"
    assert run_cli(["slln", "--config", cfg, "--out", str(out)]) == 0
    res = json.loads((out / "results.json").read_text())
    assert res["T_max"] >= 1
    assert res["verdict"] in (
        "exponential-not-rejected", "heavy-tail-favored",
        "exponential-fit-degrades", "insufficient-tail",
    )
