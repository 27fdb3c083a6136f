import copy
import json

import pytest
import yaml

from gridloop.cli import main
from gridloop.scenario_io import read_results_csv, reference_scenario_path


@pytest.fixture
def short_scenario(tmp_path):
    doc = yaml.safe_load(reference_scenario_path().read_text())
    doc["simulation"]["horizon"] = 30
    path = tmp_path / "short.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path, doc


def _single_error_line(err, prefix):
    lines = [ln for ln in err.strip().splitlines() if not ln.startswith("usage:")]
    assert len(lines) == 1
    assert lines[0].startswith(prefix + ": ")


def test_certify_admits_default_step(capsys):
    assert main(["certify", str(reference_scenario_path())]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["eps_max"] > 0.001
    assert report["admitted"] is True


def test_run_twice_is_byte_identical(short_scenario, tmp_path):
    path, _ = short_scenario
    assert main(["run", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(path), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    b = (tmp_path / "b" / "trajectory.csv").read_bytes()
    assert a == b
    header, table = read_results_csv(tmp_path / "a" / "trajectory.csv")
    assert table.shape == (30, len(header))
    doc = json.loads((tmp_path / "a" / "results.json").read_text())
    assert doc["schema_version"] == "1.0" and doc["metadata"]["plant"] == "nonlinear"


def test_run_overrides_seed_and_plant(short_scenario, tmp_path):
    path, _ = short_scenario
    assert main(["run", str(path), "--out", str(tmp_path / "a"), "--seed", "7",
                 "--plant", "linear"]) == 0
    doc = json.loads((tmp_path / "a" / "results.json").read_text())
    assert doc["metadata"]["seed"] == 7 and doc["metadata"]["plant"] == "linear"


def test_run_uses_env_output_dir(short_scenario, tmp_path, monkeypatch):
    path, _ = short_scenario
    monkeypatch.setenv("GRIDLOOP_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["run", str(path)]) == 0
    assert (tmp_path / "env" / "trajectory.csv").exists()


def test_oracle_prints_setpoints(capsys):
    assert main(["oracle", str(reference_scenario_path())]) == 0
    values = [float(v) for v in capsys.readouterr().out.split()]
    assert len(values) == 4
    assert 0 <= values[0] <= 0.5 and 0 <= values[1] <= 0.5


def test_unknown_flag_prints_usage_and_exits_1(capsys):
    assert main(["run", str(reference_scenario_path()), "--frobnicate"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("usage:")
    _single_error_line(err, "UsageError")


def test_validation_error_exit_1(tmp_path, capsys, short_scenario):
    _, doc = short_scenario
    bad = copy.deepcopy(doc)
    bad["objective"]["v_min"] = 1.2
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(bad))
    assert main(["certify", str(path)]) == 1
    _single_error_line(capsys.readouterr().err, "ScenarioError")
    assert main(["run", str(tmp_path / "absent.yaml")]) == 1
    _single_error_line(capsys.readouterr().err, "ScenarioError")


def test_inadmissible_step_exit_1(tmp_path, capsys, short_scenario):
    _, doc = short_scenario
    doc["simulation"]["epsilon"] = 0.5
    path = tmp_path / "fast.yaml"
    path.write_text(yaml.safe_dump(doc))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 1
    _single_error_line(capsys.readouterr().err, "StepSizeError")


def test_runtime_failure_exit_2(tmp_path, capsys, short_scenario):
    _, doc = short_scenario
    for entry in doc["loads"]["base"]:
        entry["p"] = -20.0
    path = tmp_path / "heavy.yaml"
    path.write_text(yaml.safe_dump(doc))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
    _single_error_line(capsys.readouterr().err, "SimulationError")


def test_ensemble_reports_pass_verdicts(capsys):
    assert main(["ensemble", str(reference_scenario_path()), "--runs", "100"]) == 0
    out = capsys.readouterr().out
    assert "PASS C_V" in out and "PASS C_S" in out
    assert "FAIL" not in out
