import csv
import json

import pytest

from lsmssm import cli

SMALL = ["--grid", "8,32", "--sample-grid", "8,16", "--degree", "12"]


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def pendulum_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pendulum")
    code = run("expand", "--model", "pendulum", "--order", "2", "--eps", "geom:1e-3:1e-1:5", "--out", out, *SMALL)
    return out, code


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gates_pass_for_pendulum(tmp_path):
    assert run("gates", "--model", "pendulum", "--out", tmp_path) == 0
    report = json.loads((tmp_path / "gates.json").read_text())
    assert report["all_passed"]


def test_gates_fail_for_example1(tmp_path, capsys):
    assert run("gates", "--model", "example1", "--out", tmp_path) == 3
    assert "decay" in capsys.readouterr().out


def test_malformed_model_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "model": "pendulum",\n  "params": {"m": 0.1,}\n}\n')
    assert run("gates", "--model", bad, "--out", tmp_path) == 2
    assert ":3:" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert run("expand", "--out", tmp_path) == 2                                    # no model
    assert run("expand", "--model", "pendulum", "--grid", "8,30", "--out", tmp_path) == 2  # M not a power of two
    assert run("frobnicate") == 2
    assert run("refine", "--model", "pendulum", "--out", tmp_path / "missing") == 2


def test_expand_outputs(pendulum_run):
    out, code = pendulum_run
    assert code == 0
    slopes = {int(r["N"]): float(r["slope"]) for r in read_csv(out / "slopes.csv")}
    for n in range(3):
        assert slopes[n] >= n + 0.8
    names = {r["name"] for r in read_csv(out / "coefficients.csv")}
    assert {"w20", "w11", "w02"} <= names
    arc = json.loads((out / "expansion.json").read_text())
    assert arc["refined"] is False
    assert arc["expansion"]["order"] == 2


def test_expand_is_deterministic(pendulum_run, tmp_path):
    out, _ = pendulum_run
    # same output directory name inside a fresh parent keeps the recorded config identical
    again = tmp_path / out.name
    again.mkdir()
    argv = ["expand", "--model", "pendulum", "--order", "2", "--eps", "geom:1e-3:1e-1:5", "--out", again, *SMALL]
    assert run(*argv) == 0
    a = json.loads((out / "expansion.json").read_text())
    b = json.loads((again / "expansion.json").read_text())
    a["config"].pop("out"), b["config"].pop("out")
    assert a == b
    assert (out / "residuals.csv").read_bytes() == (again / "residuals.csv").read_bytes()


def test_config_file_is_overridden_by_flags(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"model": "linear_decoupled", "order": 3, "eps": "0.01,0.02", "grid": [6, 16]}))
    assert run("expand", "--config", cfg, "--order", "1", "--out", tmp_path) == 0
    arc = json.loads((tmp_path / "expansion.json").read_text())
    assert arc["expansion"]["order"] == 1
    assert arc["config"]["grid"] == [6, 16]
    cfg.write_text(json.dumps({"model": "pendulum", "colour": "blue"}))
    assert run("expand", "--config", cfg, "--out", tmp_path) == 2


def test_refine_linear_system(tmp_path):
    assert run("expand", "--model", "linear_decoupled", "--order", "2", "--eps", "0.02,0.05", "--grid", "6,16",
               "--out", tmp_path) == 0
    assert run("refine", "--model", "linear_decoupled", "--stop-tol", "1e-8", "--out", tmp_path,
               "--sample-grid", "8,16") == 0
    rep = json.loads((tmp_path / "contraction.json").read_text())
    assert all(r["iterations"] == 1 for r in rep["reports"])
    assert json.loads((tmp_path / "refined.json").read_text())["refined"] is True


def test_example1_needs_force_and_then_aborts(tmp_path, capsys):
    args = ["--model", "example1", "--order", "1", "--eps", "0.05", "--grid", "6,16", "--out", tmp_path]
    assert run("expand", *args) == 3
    assert run("expand", *args, "--force") == 0
    assert "WARNING" in capsys.readouterr().err
    assert run("refine", *args, "--force", "--sample-grid", "6,16") == 4
    rep = json.loads((tmp_path / "contraction.json").read_text())
    assert rep["reports"][0]["effective_rate"] >= 1


def test_portrait(pendulum_run, tmp_path):
    out, _ = pendulum_run
    code = run("portrait", "--model", "pendulum", "--archive", out / "expansion.json", "--eps", "0,0.1",
               "--samples", "3", "--periods", "5", "--out", tmp_path)
    assert code == 0
    summary = json.loads((tmp_path / "portrait.json").read_text())["trajectories"]
    damped = [s for s in summary if s["eps"] == 0.1]
    conservative = [s for s in summary if s["eps"] == 0.0]
    assert all(s["monotone_decreasing"] for s in damped)
    assert all(s["max_radial_drift"] < 1e-8 for s in conservative)
    assert read_csv(tmp_path / "backbone.csv")


def test_portrait_figures(pendulum_run, tmp_path):
    pytest.importorskip("matplotlib")
    out, _ = pendulum_run
    code = run("portrait", "--model", "pendulum", "--archive", out / "expansion.json", "--eps", "0.1",
               "--samples", "2", "--periods", "2", "--figures", "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "portrait.png").stat().st_size > 0
    assert (tmp_path / "backbone.png").stat().st_size > 0
