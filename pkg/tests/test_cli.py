import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from powernet.cli import (
    EXIT_INEXACT, EXIT_OK, EXIT_REQUIREMENT, EXIT_SCHEMA, EXIT_SOLVER, load_scenario, main,
)
from powernet.errors import ScenarioError
from powernet.transcription import load_program

SCEN = Path(__file__).resolve().parents[1] / "demos" / "scenarios"


def scenario(tmp_path, name="eco_small", **changes):
    doc = json.loads((SCEN / f"{name}.json").read_text())
    doc.update(changes)
    path = tmp_path / f"{doc.get('name', name)}_{len(list(tmp_path.iterdir()))}.json"
    path.write_text(json.dumps(doc))
    return path


def hilly(tmp_path, **changes):
    route = {"units": "SI", "synth": {"length": 1000.0,
                                      "hill": {"start": 100.0, "end": 400.0, "grade": 0.04}}}
    return scenario(tmp_path, route=route, **changes)


# ---- run ----------------------------------------------------------------------


def test_run_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(SCEN / "eco_small.json"), "--out", str(out)]) == EXIT_OK
    assert "exact" in capsys.readouterr().out
    for f in ("trajectory.csv", "residuals.csv", "summary.json", "timings.json"):
        assert (out / f).exists()
    rows = list(csv.reader(open(out / "trajectory.csv")))
    assert rows[0] == ["k", "s", "v", "F_p", "residual_kin", "residual_leth"]
    assert len(rows) == 21
    s = json.loads((out / "summary.json").read_text())
    assert s["exit_code"] == EXIT_OK and s["exact"] and s["solver"]["status"] == "optimal"
    assert s["solver"]["gap"] <= 1e-8


def test_reruns_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["--seed", "3", "run", str(SCEN / "eco_small.json"), "--out", str(out)]) == 0
    for f in ("trajectory.csv", "residuals.csv", "summary.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_custom_two_branch_network(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(SCEN / "two_branch.json"), "--out", str(out)]) == EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["cost"] == pytest.approx(1.125, abs=1e-8)
    assert s["rounds"][0]["targets"] == {"branch2": 1}


def test_unpriced_time_is_inexact_without_rounds(tmp_path, capsys):
    path = hilly(tmp_path, T_max=1e5, regularization={"sigma0": 0.01, "max_rounds": 0})
    out = tmp_path / "out"
    assert main(["run", str(path), "--out", str(out)]) == EXIT_INEXACT
    assert "<- slack" in capsys.readouterr().out
    s = json.loads((out / "summary.json").read_text())
    assert "leth" in s["flagged"] and not s["exact"]
    assert s["residuals"]["leth"]["max"] > 1e-3


def test_case_three_reports_residual_reduction(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(hilly(tmp_path)), "--case", "3", "--sigma", "0.01",
                 "--out", str(out)]) == EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["sigma"] == 0.01
    assert s["residual_reduction"]["leth"] >= 10
    assert s["cost_drift"] <= 1e-3


def test_case_flag_needs_eco_driving(tmp_path):
    assert main(["run", str(SCEN / "cvem_small.json"), "--case", "1",
                 "--out", str(tmp_path)]) == EXIT_SCHEMA


def test_requirement_failure_exit_code(tmp_path):
    out = tmp_path / "out"
    path = scenario(tmp_path, "eco_vlo0", route={"units": "SI", "synth": {"length": 100.0}},
                    T_max=9.0)
    assert main(["run", str(path), "--out", str(out)]) == EXIT_REQUIREMENT
    s = json.loads((out / "summary.json").read_text())
    assert s["exit_code"] == EXIT_REQUIREMENT
    assert not (out / "trajectory.csv").exists()


def test_solver_failure_exit_code(tmp_path):
    path = scenario(tmp_path, solver={"tol": 1e-8, "max_iter": 2})
    assert main(["run", str(path), "--out", str(tmp_path / "out")]) == EXIT_SOLVER


@pytest.mark.parametrize("change", [
    {"units": "imperial"},
    {"schema_version": 99},
    {"T_max": -1.0},
    {"solver": {"tolerance": 1e-8}},
])
def test_schema_violations(tmp_path, change):
    path = scenario(tmp_path, **change)
    with pytest.raises(ScenarioError):
        load_scenario(path)
    assert main(["run", str(path), "--out", str(tmp_path / "out")]) == EXIT_SCHEMA


def test_block_without_units_is_rejected(tmp_path):
    doc = json.loads((SCEN / "eco_small.json").read_text())
    del doc["vehicle"]["units"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["check", str(path)]) == EXIT_SCHEMA


def test_batch_runs_each_scenario(tmp_path, capsys):
    files = [str(SCEN / "eco_small.json"), str(SCEN / "two_branch.json")]
    assert main(["run", *files, "--batch", "--jobs", "2", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "eco_small" / "summary.json").exists()
    assert (tmp_path / "two_branch" / "summary.json").exists()
    assert main(["run", *files, "--out", str(tmp_path)]) == EXIT_SCHEMA


# ---- check, oracle, dump, solve ------------------------------------------------


def test_check_passes_on_study_route(capsys):
    assert main(["check", str(SCEN / "eco.json")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "rank margin" in text and "fail" not in text


def test_check_reports_standstill_witness(capsys):
    assert main(["check", str(SCEN / "eco_vlo0.json"), "--json"]) == EXIT_REQUIREMENT
    d = json.loads(capsys.readouterr().out)
    v = d["requirements"]["v_rank"]
    assert v["state"] == "fail" and v["witness"]["u"]["v"] == 0.0


def test_oracle_table(capsys):
    assert main(["oracle", str(SCEN / "eco_small.json"), "--grid", "51", "101", "201",
                 "--json"]) == EXIT_OK
    d = json.loads(capsys.readouterr().out)
    gaps = [r["rel_gap"] for r in d["rows"]]
    assert gaps == sorted(gaps, reverse=True) and 0 <= gaps[-1] <= 0.02
    assert main(["oracle", str(SCEN / "cvem_small.json"), "--grid", "51"]) == EXIT_OK
    assert "DP value" in capsys.readouterr().out


def test_dump_then_solve(tmp_path, capsys):
    prog = tmp_path / "cvem.txt"
    assert main(["dump", str(SCEN / "cvem_small.json"), str(prog)]) == EXIT_OK
    assert load_program(prog).n > 0
    out = tmp_path / "sol.json"
    assert main(["solve", str(prog), "--vectors", "--out", str(out)]) == EXIT_OK
    d = json.loads(out.read_text())
    assert d["status"] == "optimal" and len(d["primal"]) == load_program(prog).n
    assert main(["solve", str(prog), "--max-iter", "1"]) == EXIT_SOLVER


def test_dump_refuses_failing_requirements_unless_forced(tmp_path):
    path = scenario(tmp_path, "eco_vlo0", route={"units": "SI", "synth": {"length": 100.0}},
                    T_max=9.0)
    assert main(["dump", str(path), str(tmp_path / "p.txt")]) == EXIT_REQUIREMENT
    assert main(["dump", str(path), str(tmp_path / "p.txt"), "--force"]) == EXIT_OK


def test_console_entry_point(tmp_path):
    env = dict(os.environ, POWERNET_SEED="0")
    r = subprocess.run([sys.executable, "-m", "powernet.cli", "check",
                        str(SCEN / "eco_vlo0.json")], capture_output=True, text=True, env=env)
    assert r.returncode == EXIT_REQUIREMENT
    assert "v_rank" in r.stdout and "fail" in r.stdout
