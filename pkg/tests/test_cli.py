import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from imiwae.cli import main
from imiwae.datagen import write_csv
from imiwae.nn import make_rng


@pytest.fixture
def csv_with_holes(tmp_path):
    rng = make_rng(1)
    z = rng.normal(size=(60, 1))
    x = np.hstack([z, z ** 2, -z]) + 0.1 * rng.normal(size=(60, 3))
    mask = (rng.random((60, 3)) > 0.2).astype(int)
    mask[:, 0] = 1
    path = tmp_path / "data.csv"
    write_csv(path, x, ["a", "b", "c"], mask)
    return path, mask


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_dry_run_echoes_resolved_config(capsys):
    assert main(["run", "--preset", "theory-all", "--dry-run"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["kind"] == "theory" and cfg["checks"]


def test_bad_config_lists_all_problems(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"kind": "simulate-impute", "replications": -1, "foo": 1,
                                "train": {"batch_size": 0}}))
    assert main(["run", str(path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and len(err["problems"]) == 3


def test_invalid_json_is_config_error(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["run", str(path)]) == 2


def test_missing_data_file_exit_code(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "m.json")])
    assert code == 3
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_run_tiny_config_and_aggregate(tmp_path, capsys):
    cfg = {"kind": "theory", "name": "th", "output_dir": str(tmp_path), "checks": ["lemma1"],
           "overrides": {"lemma1": {"n_tables": 3}}}
    path = tmp_path / "th.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", str(path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["report"].endswith("th.json")
    assert main(["aggregate", out["report"], out["report"]]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert rows[0]["metric"] == "lemma1_passed" and rows[0]["n"] == "2"


def test_aggregate_without_reports_fails(capsys):
    assert main(["aggregate"]) == 2


def test_train_impute_generate_round_trip(tmp_path, csv_with_holes, capsys):
    data, mask = csv_with_holes
    model = tmp_path / "model.json"
    assert main(["train", "--data", str(data), "--out", str(model), "--kappa1", "2",
                 "--hidden", "8", "--epochs", "3", "--batch-size", "32"]) == 0
    assert json.loads(capsys.readouterr().out)["epochs"] == 3

    out = tmp_path / "filled.csv"
    assert main(["impute", "--model", str(model), "--data", str(data), "--out", str(out),
                 "--mode", "mar", "--B", "40"]) == 0
    header, filled = read_csv(out)
    _, original = read_csv(data)
    assert header == ["a", "b", "c"]
    assert np.isfinite(filled).all()
    np.testing.assert_array_equal(filled[mask == 1], original[mask == 1])
    sidecar = json.loads((tmp_path / "filled.csv.ess.json").read_text())
    assert sidecar["imputed_rows"] == int((mask.min(axis=1) == 0).sum())

    gen = tmp_path / "gen.csv"
    assert main(["generate", "--model", str(model), "--n", "15", "--out", str(gen)]) == 0
    header, rows = read_csv(gen)
    assert header == ["a", "b", "c"] and rows.shape == (15, 3)


def test_verify_theory_single_check(tmp_path, capsys):
    out = tmp_path / "theory.json"
    assert main(["verify-theory", "--check", "lemma1", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["lemma1"]["passed"]
    assert "lemma1: PASS" in capsys.readouterr().err


def test_cv_command(csv_with_holes, capsys):
    data, _ = csv_with_holes
    assert main(["cv", "--data", str(data), "--kappa1", "1,2", "--folds", "2", "--epochs", "1",
                 "--hidden", "4", "--B", "10"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["selected"] in (1, 2) and set(out["mean_rmse"]) == {"1", "2"}


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "imiwae.cli", "run", "--preset", "cv-select", "--dry-run"],
                         capture_output=True, text=True, check=True)
    assert json.loads(res.stdout)["cv"]["candidates"] == [1, 3]
