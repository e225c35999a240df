from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from mlfpca.cli import main
from mlfpca.serialize import load_model


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.csv"
    assert main(["simulate", "-o", str(data), "--variables", "15", "--replicates", "3", "--seed", "7",
                 "--truth", str(root / "truth.csv"), "--truth-model", str(root / "truth.json")]) == 0
    return root


def test_simulate_reproducible(workspace, tmp_path):
    again = tmp_path / "again.csv"
    main(["simulate", "-o", str(again), "--variables", "15", "--replicates", "3", "--seed", "7"])
    assert again.read_bytes() == (workspace / "data.csv").read_bytes()
    manifest = json.loads((workspace / "data.csv.manifest.json").read_text())
    assert manifest["settings"]["seed"] == 7


def test_fit_writes_outputs(workspace):
    out = workspace / "fit"
    rc = main(["fit", str(workspace / "data.csv"), "-o", str(out), "--model", "gaussian",
               "--rank-variable", "2", "--rank-replicate", "1"])
    assert rc == 0
    for name in ("model.json", "curves.csv", "trace.csv", "manifest.json"):
        assert (out / name).exists()
    assert next(csv.reader((out / "trace.csv").open())) == ["iteration", "loglik", "delta"]
    assert load_model(out / "model.json").params.K == 2


def test_fit_auto_ranks_writes_scree(workspace):
    out = workspace / "auto"
    assert main(["fit", str(workspace / "data.csv"), "-o", str(out), "--rank-replicate", "auto",
                 "--max-iterations", "50"]) == 0
    assert (out / "scree.csv").exists()
    settings = json.loads((out / "manifest.json").read_text())["settings"]
    assert settings["rep_threshold"] == 0.6


def test_evaluate_identical_is_zero(workspace, capsys):
    t = str(workspace / "truth.json")
    assert main(["evaluate", t, t]) == 0
    assert "mean_mse=0.0" in capsys.readouterr().out
    assert main(["evaluate", str(workspace / "truth.csv"), t]) == 0


def test_plot_data_definition(workspace):
    out = workspace / "pc1.csv"
    assert main(["plot-data", str(workspace / "truth.json"), "-o", str(out), "--pc", "1", "--scale", "0.5"]) == 0
    rows = np.array([[float(x) for x in r] for r in list(csv.reader(out.open()))[1:]])
    m = load_model(workspace / "truth.json")
    np.testing.assert_allclose(rows[:, 2] - rows[:, 1], 0.5 * m.basis.B @ m.params.Theta_alpha[:, 0], atol=1e-12)
    np.testing.assert_allclose(rows[:, 1] - rows[:, 3], rows[:, 2] - rows[:, 1], atol=1e-12)


def test_missing_input_exits_1(tmp_path, capsys):
    assert main(["fit", str(tmp_path / "nope.csv"), "-o", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_exits_1(workspace, tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("not_a_key = 3\n")
    assert main(["fit", str(workspace / "data.csv"), "-o", str(tmp_path), "--config", str(cfg)]) == 1


def test_precedence_defaults_file_env_flags(workspace, tmp_path, monkeypatch):
    cfg = tmp_path / "c.conf"
    cfg.write_text("max-iterations = 7\ntolerance = 1e-3\n# comment\n")
    monkeypatch.setenv("MLFPCA_TOLERANCE", "1e-4")
    out = tmp_path / "o"
    assert main(["fit", str(workspace / "data.csv"), "-o", str(out), "--config", str(cfg),
                 "--max-iterations", "9"]) == 0
    s = json.loads((out / "manifest.json").read_text())["settings"]
    assert s["max_iterations"] == 9 and s["tolerance"] == 1e-4


def test_numerical_failure_exits_2(tmp_path):
    data = tmp_path / "d.csv"
    rows = ["variable,replicate,time,value"] + [f"a,r{j},0,{j}" for j in range(3)]
    data.write_text("\n".join(rows) + "\n")
    # one design time cannot support a cubic spline mean
    assert main(["fit", str(data), "-o", str(tmp_path / "o"), "--knots", "", "--basis", "bspline-cubic"]) in (1, 2)


def test_select_rank_and_stn(workspace, capsys):
    assert main(["select-rank", str(workspace / "data.csv"), "-o", str(workspace / "scree.csv"),
                 "--max-iterations", "30"]) == 0
    assert "K=" in capsys.readouterr().out
    out = workspace / "stn"
    assert main(["fit", str(workspace / "data.csv"), "-o", str(out), "--model", "stn", "--sweeps", "20",
                 "--burn-in", "5", "--mcem-iterations", "2", "--threads", "1"]) == 0
    assert next(csv.reader((out / "trace.csv").open())) == ["iteration", "block", "summary_statistic", "value"]
