import json
import subprocess
import sys

import numpy as np
import pytest

from switchopt.cia import ControlGrid
from switchopt.cli import (
    EXIT_INFEASIBLE,
    EXIT_INVALID,
    EXIT_OK,
    RunConfig,
    cmd_round,
    main,
    parse_sequence,
)
from switchopt.errors import ValidationError
from switchopt.model import Trajectory
from switchopt.sto import Sequence


def test_parse_sequence():
    assert parse_sequence("1 1; 0,1 ;1 0").stages == ((1, 1), (0, 1), (1, 0))
    with pytest.raises(ValidationError):
        parse_sequence(" ; ")
    with pytest.raises(ValidationError):
        parse_sequence("1 x")


def test_config_defaults_and_validation():
    cfg = RunConfig()
    assert cfg.N == 300 and cfg.min_uptime == 0.5 and cfg.m is None
    assert cfg.initial_sequence.stages == ((1, 1), (0, 1), (1, 0), (0, 0), (1, 1), (0, 1), (1, 0))
    cfg = RunConfig.from_mapping({"N": "30", "m": "auto", "min_uptime": "0", "alpha": "50"})
    assert (cfg.N, cfg.m, cfg.min_uptime, cfg.params.alpha) == (30, None, 0.0, 50.0)
    for bad in ({"N": "1"}, {"N": "2.5"}, {"m": "0"}, {"min_uptime": "-1"}, {"tf": "0"},
                {"initial_sequence": "0 2"}, {"unknown": "1"}, {"min_uptime": "nan"}):
        with pytest.raises(ValidationError):
            RunConfig.from_mapping(bad)


def test_bad_config_exits_with_validation_code(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("tf = 0\n")
    assert main(["relax", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_INVALID
    assert "error" in capsys.readouterr().err
    assert main(["relax", "--nodes", "1", "--out-dir", str(tmp_path)]) == EXIT_INVALID
    assert main(["round", "--grid", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path)]) == EXIT_INVALID


def test_tiny_relax_run(tmp_path):
    assert main(["relax", "--nodes", "2", "--out-dir", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "relaxed_report.json").read_text())
    assert np.isfinite(report["objective"]) and report["nodes"] == 2
    assert ControlGrid.from_csv(tmp_path / "relaxed_grid.csv").values.shape == (1, 2)
    Trajectory.from_csv(tmp_path / "relaxed_trajectory.csv")


def test_round_passes_binary_grid_through(tmp_path):
    vals = np.zeros((20, 2))
    vals[:8, 1] = 1.0
    vals[12:, 0] = 1.0
    ControlGrid.uniform(vals, dt=0.5).to_csv(tmp_path / "relaxed_grid.csv")
    report = cmd_round(RunConfig(out_dir=tmp_path), echo=lambda s: None)
    assert report["eta"] == 0.0
    assert report["dwell_violations"] == 0
    np.testing.assert_array_equal(ControlGrid.from_csv(tmp_path / "projected_grid.csv").values, vals)
    data = json.loads((tmp_path / "projected_report.json").read_text())
    assert data["simulated_cost"] == report["simulated_cost"]


def test_simulate_constant_and_replay(tmp_path):
    out = tmp_path / "a.csv"
    assert main(["simulate", "--constant", "0,1", "10,10", "--nodes", "50", "--output", str(out),
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    first = Trajectory.from_csv(out)
    assert main(["simulate", "--controls", str(out), "--output", str(tmp_path / "b.csv"),
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    again = Trajectory.from_csv(tmp_path / "b.csv")
    np.testing.assert_array_equal(first.states, again.states)
    assert main(["simulate", "--constant", "0,1,1", "10,10", "--out-dir", str(tmp_path)]) == EXIT_INVALID


def test_isto_fixed_point_run(tmp_path, capsys):
    args = ["isto", "--set", "initial_sequence=0 1", "--set", "m=40", "--min-uptime", "0",
            "--out-dir", str(tmp_path)]
    assert main(args) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("iter=") == 1
    log = json.loads((tmp_path / "isto_log.json").read_text())
    assert len(log) == 1 and log[0]["removed"] == []
    sol = json.loads((tmp_path / "isto_solution.json").read_text())
    assert sol["sequence"] == [[0, 1]] and sol["w"] == [10.0]


def test_isto_infeasible_exit_code(tmp_path):
    # a two second minimum uptime cannot hold for six stages in ten seconds
    # once every one of them is forced on; with the default schedule the run
    # must end either clean or with the infeasibility code, never a crash
    args = ["isto", "--set", "initial_sequence=0 1; 1 0", "--set", "m=10", "--min-uptime", "6",
            "--out-dir", str(tmp_path)]
    assert main(args) in (EXIT_OK, EXIT_INFEASIBLE)


def test_outputs_are_deterministic(tmp_path):
    runs = []
    for name in ("one", "two"):
        out = tmp_path / name
        assert main(["relax", "--nodes", "12", "--out-dir", str(out)]) == EXIT_OK
        assert main(["round", "--out-dir", str(out)]) == EXIT_OK
        assert main(["isto", "--set", "initial_sequence=0 1; 0 0", "--set", "m=15", "--out-dir", str(out)]) == EXIT_OK
        runs.append(out)
    for fname in ("relaxed_trajectory.csv", "relaxed_grid.csv", "projected_grid.csv",
                  "projected_trajectory.csv", "isto_trajectory.csv"):
        assert (runs[0] / fname).read_bytes() == (runs[1] / fname).read_bytes(), fname
    for fname in ("relaxed_report.json", "projected_report.json", "isto_solution.json", "isto_log.json"):
        a, b = (json.loads((r / fname).read_text()) for r in runs)
        assert _strip_times(a) == _strip_times(b), fname


def _strip_times(data):
    if isinstance(data, dict):
        return {k: _strip_times(v) for k, v in data.items() if k != "wall_time"}
    if isinstance(data, list):
        return [_strip_times(v) for v in data]
    return data


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "switchopt", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("relax", "round", "isto", "simulate", "compare"):
        assert cmd in res.stdout
