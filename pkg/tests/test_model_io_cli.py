import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hopf_hybrid.cli import EXIT_BRANCH, EXIT_INPUT, EXIT_OK, EXIT_TRAINING, main
from hopf_hybrid.model import HybridModel, fmt_float
from hopf_hybrid.reference_systems import TrainingDataset
from hopf_hybrid.storage import read_csv, read_dataset, read_model, write_dataset, write_model
from hopf_hybrid.training import TrainingConfig

from test_training import TINY, _affine_records


def _write_config(path, **changes):
    d = TrainingConfig(**dict(TINY, **changes)).to_dict()
    Path(path).write_text(json.dumps(d))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    recs, _ = _affine_records(n=200, turns=2.0)
    write_dataset(TrainingDataset(recs, {"z1": "m", "z2": "m", "mu": "nd"}), root / "data")
    cfg = _write_config(root / "cfg.json")
    code = main(["train", "--data", str(root / "data"), "--config", cfg, "--out", str(root / "model.json")])
    assert code == EXIT_OK
    return root


def _run(*args):
    return main([str(a) for a in args])


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    recs, _ = _affine_records()
    ds = TrainingDataset(recs, {"z1": "m", "z2": "m", "mu": "nd"})
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert [r.mu for r in back] == [r.mu for r in ds]
    for a, b in zip(ds, back):
        assert np.array_equal(a.states, b.states) and np.array_equal(a.t, b.t)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["columns"] == ["z1", "z2"] and manifest["records"][0]["dt"] == pytest.approx(recs[0].dt)


def test_csv_format(tmp_path):
    recs, _ = _affine_records()
    write_dataset(TrainingDataset(recs[:1]), tmp_path)
    raw = (tmp_path / "record_00_stable.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    header, rows = raw.decode().split("\n")[0], raw.decode().split("\n")[1:-1]
    assert header == "t,z1,z2" and len(rows) == 200
    value = rows[7].split(",")[1]
    assert value == fmt_float(float(value)) and float(value) == recs[0].states[7, 0]


@pytest.mark.parametrize("x", [0.1, 1 / 3, -2.5e-300, 12345.678901234567, 0.0])
def test_float_format_is_exact(x):
    s = fmt_float(x)
    assert float(s) == x
    digits = s.lstrip("-").split("e")[0].replace(".", "").lstrip("0")
    assert len(digits) <= 17


def test_model_round_trip_is_byte_identical(workspace, tmp_path):
    first = (workspace / "model.json").read_bytes()
    model = read_model(workspace / "model.json")
    write_model(model, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == first
    doc = json.loads(first)
    assert doc["format_version"] == model.format_version and isinstance(doc["normal_form"]["mu0"], str)


def test_newer_format_rejected(workspace):
    doc = json.loads((workspace / "model.json").read_text())
    doc["format_version"] = 99
    with pytest.raises(ValueError):
        HybridModel.from_dict(doc)


def test_no_temporary_files_left(workspace):
    assert not [p for p in workspace.rglob("*.tmp")]


def test_thread_cap_environment_variable():
    env = dict(os.environ, HOPF_HYBRID_THREADS="3")
    env.pop("OMP_NUM_THREADS", None)
    out = subprocess.run([sys.executable, "-c", "import os, hopf_hybrid; print(os.environ['OMP_NUM_THREADS'])"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "3"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def test_gen_data_vdp_defaults(tmp_path):
    assert _run("gen-data", "--system", "vdp", "--out", tmp_path) == EXIT_OK
    assert len(list(tmp_path.glob("*.csv"))) == 6 and (tmp_path / "manifest.json").exists()
    assert sum(r.t.size for r in read_dataset(tmp_path)) == 3000


def test_gen_data_aero_subset(tmp_path):
    assert _run("gen-data", "--system", "aero", "--mu", "15.5", "--unstable-mu", "16.3", "--out", tmp_path) == 0
    ds = read_dataset(tmp_path)
    assert [(r.mu, r.stability) for r in ds] == [(15.5, "stable"), (16.3, "unstable")]
    assert all(r.t.size == 1000 for r in ds)


def test_gen_data_failure_is_input_error(tmp_path, capsys):
    assert _run("gen-data", "--system", "vdp", "--mu", "-0.5", "--out", tmp_path) == EXIT_INPUT
    assert "NoLco" in capsys.readouterr().err


def test_bad_system_name_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        _run("gen-data", "--system", "lorenz", "--out", tmp_path)
    assert info.value.code == EXIT_INPUT


def test_train_writes_report_and_repeats_bytewise(workspace, tmp_path):
    report = json.loads((workspace / "model.report.json").read_text())
    assert report["failed_stage"] is None and report["mu0"] is not None
    assert _run("train", "--data", workspace / "data", "--config", workspace / "cfg.json",
                "--out", tmp_path / "m.json") == EXIT_OK
    assert (tmp_path / "m.json").read_bytes() == (workspace / "model.json").read_bytes()


def test_missing_config_field_names_it(workspace, tmp_path, capsys):
    d = json.loads((workspace / "cfg.json").read_text())
    del d["stage2"]["lbfgs_step"]
    (tmp_path / "bad.json").write_text(json.dumps(d))
    code = _run("train", "--data", workspace / "data", "--config", tmp_path / "bad.json", "--out", tmp_path / "m.json")
    assert code == EXIT_INPUT and "stage2.lbfgs_step" in capsys.readouterr().err
    assert not (tmp_path / "m.json").exists()


def test_unreadable_data_is_input_error(workspace, tmp_path):
    assert _run("train", "--data", tmp_path / "nowhere", "--config", workspace / "cfg.json",
                "--out", tmp_path / "m.json") == EXIT_INPUT


def test_non_finite_data_is_input_error(workspace, tmp_path):
    recs, _ = _affine_records()
    recs[1].states[4, 0] = np.nan
    write_dataset(TrainingDataset(recs), tmp_path / "d")
    assert _run("train", "--data", tmp_path / "d", "--config", workspace / "cfg.json",
                "--out", tmp_path / "m.json") == EXIT_INPUT


@pytest.mark.parametrize("lr", [1e6, 1e200])
def test_diverging_training_aborts_with_partial_report(workspace, tmp_path, lr):
    cfg = _write_config(tmp_path / "wild.json", stage2={"adam_iters": 10, "adam_lr": lr, "lbfgs_iters": 0,
                                                        "lbfgs_step": 1e-5})
    code = _run("train", "--data", workspace / "data", "--config", cfg, "--out", tmp_path / "m.json")
    assert code == EXIT_TRAINING
    report = json.loads((tmp_path / "m.report.json").read_text())
    assert report["failed_stage"] == "stage2" and len(report["stage_traces"]["stage1"]) == 40
    assert not (tmp_path / "m.json").exists()


def test_corrupted_model_is_input_error(workspace, tmp_path):
    text = (workspace / "model.json").read_text()
    (tmp_path / "broken.json").write_text(text[: len(text) // 2])
    assert _run("eval", "--model", tmp_path / "broken.json", "--data", workspace / "data",
                "--out", tmp_path / "m.json") == EXIT_INPUT
    assert _run("predict-orbit", "--model", tmp_path / "broken.json", "--mu", 0.5,
                "--out", tmp_path / "o.csv") == EXIT_INPUT


def test_eval_reproduces_training_losses(workspace, tmp_path):
    assert _run("eval", "--model", workspace / "model.json", "--data", workspace / "data",
                "--out", tmp_path / "metrics.json") == EXIT_OK
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    report = json.loads((workspace / "model.report.json").read_text())
    assert metrics["shape_loss"] == pytest.approx(report["final_shape_loss"], rel=1e-12)
    assert metrics["speed_loss"] == pytest.approx(report["final_speed_loss"], rel=1e-12)
    assert metrics["fingerprint_match"] is True
    assert metrics["invertibility"]["min_abs_det"] > 0
    assert len(metrics["orbit_errors"]) == len(metrics["timeseries_nrmse"]) == 4


def test_bifurcation_diagram_supercritical(workspace, tmp_path):
    out = tmp_path / "diagram.csv"
    assert _run("predict-bifurcation", "--model", workspace / "model.json", "--mu-min", 0.1, "--mu-max", 1.2,
                "--steps", 12, "--out", out) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "mu,branch,radius,amplitude,a0,z1_ptp,z2_ptp"
    branches = [ln.split(",")[1] for ln in lines[1:]]
    assert set(branches) <= {"stable", "hopf"} and branches.count("hopf") == 1
    mu0 = read_model(workspace / "model.json").normal_form.mu0
    assert branches.count("stable") == int(np.sum(np.linspace(0.1, 1.2, 12) > mu0))


def test_bifurcation_single_step(workspace, tmp_path):
    out = tmp_path / "one.csv"
    assert _run("predict-bifurcation", "--model", workspace / "model.json", "--mu-min", 0.9, "--mu-max", 0.9,
                "--steps", 1, "--out", out) == EXIT_OK
    rows = out.read_text().splitlines()[1:]
    assert [r.split(",")[1] for r in rows] == ["stable", "hopf"]


def test_bifurcation_outside_existence_region(workspace, tmp_path):
    out = tmp_path / "none.csv"
    assert _run("predict-bifurcation", "--model", workspace / "model.json", "--mu-min", -3, "--mu-max", -2,
                "--steps", 5, "--out", out) == EXIT_INPUT
    # the marker rows are still written
    assert out.read_text().splitlines()[1].split(",")[1] == "hopf"


def test_predict_orbit_and_timeseries(workspace, tmp_path):
    model = workspace / "model.json"
    assert _run("predict-orbit", "--model", model, "--mu", 0.6, "--out", tmp_path / "o.csv") == EXIT_OK
    header, data = read_csv(tmp_path / "o.csv")
    assert header == ["phi", "z1", "z2", "mu"] and data.shape == (100, 4)
    assert _run("predict-timeseries", "--model", model, "--mu", 0.6, "--tmax", 2.5, "--dt", 0.01,
                "--init", "0.1,0.2", "--out", tmp_path / "ts.csv") == EXIT_OK
    header, data = read_csv(tmp_path / "ts.csv")
    assert header == ["t", "z1_hat", "z2_hat", "mu"] and data.shape[0] == 251
    np.testing.assert_allclose(np.diff(data[:, 0]), 0.01, rtol=1e-9)


def test_unstable_branch_of_supercritical_model_is_missing(workspace, tmp_path):
    for cmd in ("predict-orbit", "predict-timeseries"):
        assert _run(cmd, "--model", workspace / "model.json", "--mu", 0.6, "--stability", "unstable",
                    "--out", tmp_path / "x.csv") == EXIT_BRANCH
    assert not (tmp_path / "x.csv").exists()


def test_cross_validate_report(workspace, tmp_path):
    assert _run("cross-validate", "--data", workspace / "data", "--config", workspace / "cfg.json",
                "--out", tmp_path / "cv.json") == EXIT_OK
    doc = json.loads((tmp_path / "cv.json").read_text())
    assert doc["schema"] == "hopf_hybrid.cross_validation" and doc["schema_version"] == 1
    assert len(doc["folds"]) == 4
    assert {"record_id", "mu0", "saddle_node", "orbit_error", "timeseries_nrmse", "error"} <= set(doc["folds"][0])
