import json

import pandas as pd
import pytest

from main import main

FAST = ["--chains", "2", "--warmup", "150", "--samples", "150"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    log = str(root / "trace.jsonl")
    assert main(["simulate", "--out", str(root / "sim"), "--seed", "4", "--locations", "5", "--n-times", "6", "--log", log]) == 0
    # short chains: the run is accepted with --force, and so are the commands reading it
    code = main(["fit", "--data", str(root / "sim" / "data.csv"), "--out", str(root / "run"), "--seed", "1", "--force", "--log", log, *FAST])
    assert code == 0
    return root


def _log(root):
    return ["--log", str(root / "trace.jsonl")]


def test_simulate_outputs(workspace):
    sim = workspace / "sim"
    data = pd.read_csv(sim / "data.csv")
    assert list(data.columns[:6]) == ["id", "Sx", "Sy", "H", "S", "I"]
    assert (data["y1"] == 0).all()
    truth = json.loads((sim / "truth.json").read_text())
    assert truth["seed"] == 4
    assert list(pd.read_csv(sim / "grid.csv").columns) == ["px", "py", "H", "S", "I"]


def test_fit_outputs(workspace):
    run = workspace / "run"
    assert (run / "chain_1.csv").exists() and (run / "chain_2.csv").exists()
    assert json.loads((run / "diagnostics.json").read_text())["chains"] == 2


def test_predict_observed_and_new_location(workspace):
    run, out = workspace / "run", workspace / "pred"
    assert main(["predict", "--run", str(run), "--location", "L02", "--out", str(out), "--force", *_log(workspace)]) == 0
    frame = pd.read_csv(out / "prediction_L02.csv")
    assert frame["mean"].iloc[0] == 0.0
    assert (frame["lower95"] <= frame["upper95"]).all()

    new = workspace / "pred_new"
    inputs = ["120", "35", "55", "7", "9"]
    assert main(["predict", "--run", str(run), "--inputs", *inputs, "--out", str(new), "--force", *_log(workspace)]) == 0
    assert (new / "prediction_new.csv").exists()


def test_unknown_location(workspace):
    out = workspace / "pred_unknown"
    assert main(["predict", "--run", str(workspace / "run"), "--location", "nope", "--out", str(out), *_log(workspace)]) == 2


def test_map(workspace):
    out = workspace / "map"
    code = main(
        ["map", "--run", str(workspace / "run"), "--grid", str(workspace / "sim" / "grid.csv"), "--times", "1", "6", "--variance", "--out", str(out), "--force", *_log(workspace)]
    )
    assert code == 0
    frame = pd.read_csv(out / "map.csv")
    assert set(frame["t"]) == {1.0, 6.0}
    assert "variance" in frame.columns
    assert (out / "map_t006.pgm").exists()


def test_map_without_run_names_missing_file(workspace, capsys):
    code = main(["map", "--run", str(workspace / "missing"), "--grid", str(workspace / "sim" / "grid.csv"), "--out", str(workspace / "m2"), *_log(workspace)])
    assert code == 2
    assert "run.json" in capsys.readouterr().err


def test_cv_writes_report(workspace):
    out = workspace / "cv.json"
    sampler = ["--chains", "2", "--warmup", "500", "--samples", "500"]
    code = main(
        ["cv", "--data", str(workspace / "sim" / "data.csv"), "--scheme", "cv2", "--max-folds", "2", "--out", str(out), *_log(workspace), *sampler]
    )
    assert code == 0
    report = json.loads(out.read_text())
    assert report["scheme"] == "cv2"
    assert report["reference"]["with_derivatives"]["elpd"] == -11.70
    folds = report["reports"]["with_derivatives"]
    assert folds["folds_total"] == 2
    assert folds["folds_excluded"] < 2


def test_basis_dump(workspace):
    out = workspace / "basis"
    assert main(["basis", "--n-times", "6", "--knots", "2", "--out", str(out), *_log(workspace)]) == 0
    assert len(pd.read_csv(out / "knots.csv")) == 2


def test_single_chain_is_rejected(workspace):
    code = main(["fit", "--data", str(workspace / "sim" / "data.csv"), "--out", str(workspace / "one"), "--chains", "1", *_log(workspace)])
    assert code == 2
    assert not (workspace / "one").exists()


def test_existing_output_needs_force(workspace):
    code = main(["simulate", "--out", str(workspace / "sim"), *_log(workspace)])
    assert code == 2


def test_same_seed_same_chain_files(workspace):
    data = str(workspace / "sim" / "data.csv")
    args = ["--seed", "9", "--chains", "2", "--warmup", "30", "--samples", "20", "--force", *_log(workspace)]
    assert main(["fit", "--data", data, "--out", str(workspace / "r1"), *args]) == 0
    assert main(["fit", "--data", data, "--out", str(workspace / "r2"), *args]) == 0
    for name in ("chain_1.csv", "chain_2.csv"):
        assert (workspace / "r1" / name).read_bytes() == (workspace / "r2" / name).read_bytes()


def test_convergence_gate(workspace):
    out = workspace / "short"
    code = main(["fit", "--data", str(workspace / "sim" / "data.csv"), "--out", str(out), "--chains", "2", "--warmup", "10", "--samples", "4", *_log(workspace)])
    assert code == 3
    # draws are still written for inspection
    assert (out / "diagnostics.json").exists()


def test_predict_and_map_require_converged_run(workspace, with_rhat, capsys):
    passing = with_rhat(workspace / "run", workspace / "gate_pass", 1.01)
    failing = with_rhat(workspace / "run", workspace / "gate_fail", 1.2)
    grid = str(workspace / "sim" / "grid.csv")

    assert main(["predict", "--run", str(passing), "--location", "L01", "--out", str(workspace / "gp"), *_log(workspace)]) == 0
    assert main(["predict", "--run", str(failing), "--location", "L01", "--out", str(workspace / "gf"), *_log(workspace)]) == 3
    assert "--force" in capsys.readouterr().err
    assert not (workspace / "gf").exists()
    assert main(["map", "--run", str(failing), "--grid", grid, "--out", str(workspace / "mf"), *_log(workspace)]) == 3

    forced = ["--run", str(failing), "--out", str(workspace / "gff"), "--force", *_log(workspace)]
    assert main(["predict", "--location", "L01", *forced]) == 0


@pytest.mark.slow
def test_default_fit_converges(tmp_path):
    log = ["--log", str(tmp_path / "trace.jsonl")]
    assert main(["simulate", "--out", str(tmp_path / "sim"), "--seed", "2", *log]) == 0
    # default sampler settings, no --force
    assert main(["fit", "--data", str(tmp_path / "sim" / "data.csv"), "--out", str(tmp_path / "run"), "--seed", "3", *log]) == 0
    diagnostics = json.loads((tmp_path / "run" / "diagnostics.json").read_text())
    assert diagnostics["max_rhat"] < 1.05
    assert diagnostics["min_ess_bulk"] > 100
    assert diagnostics["failing"] == []
