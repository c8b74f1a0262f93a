import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from pevmpc.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from pevmpc.report import read_csv
from pevmpc.scenario import load_scenario

from conftest import data_path

CASE3 = str(data_path("case3_scenario.ini"))


def kv(text: str) -> dict:
    return dict(line.split("=", 1) for line in text.strip().splitlines() if "=" in line)


def test_online_outputs(tmp_path, capsys):
    assert main(["simulate-online", "--scenario", CASE3, "--out", str(tmp_path)]) == EXIT_OK
    assert "online total" in capsys.readouterr().out
    trace = read_csv(tmp_path / "online_trace.csv")
    assert [r["slot"] for r in trace] == ["1", "2", "3", "4"]
    assert all(r["solve_ms"] == "" for r in trace)
    summary = {r["key"]: r["value"] for r in read_csv(tmp_path / "summary.csv")}
    assert summary["online_complete"] == "1" and summary["online_rejected"] == "1"
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert len(meta["online"]["solve_ms"]) == 4
    assert set(read_csv(tmp_path / "online_voltages.csv")[0]) == {"slot", "v_bus1", "v_bus2", "v_bus3"}


def test_timings_fill_solve_ms(tmp_path):
    assert main(["simulate-online", "--scenario", CASE3, "--out", str(tmp_path), "--timings"]) == EXIT_OK
    assert all(r["solve_ms"] != "" for r in read_csv(tmp_path / "online_trace.csv"))


def test_offline_and_compare(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["compare", "--scenario", CASE3, "--out", out]) == EXIT_CONFIG
    assert main(["simulate-online", "--scenario", CASE3, "--out", out]) == EXIT_OK
    assert main(["compare", "--scenario", CASE3, "--out", out]) == EXIT_CONFIG
    assert main(["simulate-offline", "--scenario", CASE3, "--out", out, "--method", "dnoa"]) == EXIT_OK
    capsys.readouterr()
    assert main(["compare", "--scenario", CASE3, "--out", out]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ratio ")
    rows = {r["key"]: r["value"] for r in read_csv(tmp_path / "compare.csv")}
    assert 0 < float(rows["ratio"]) <= 1 + 1e-9 and rows["flags"] == ""
    trace = read_csv(tmp_path / "offline_trace.csv")
    assert trace[-1]["slot"] == "lower_bound"
    assert len(read_csv(tmp_path / "compare_load.csv")) == 4


def test_compare_run(tmp_path, capsys):
    assert main(["compare", "--run", "--scenario", CASE3, "--out", str(tmp_path)]) == EXIT_OK
    assert "ratio" in capsys.readouterr().out


def test_config_errors(tmp_path):
    out = str(tmp_path)
    assert main(["simulate-offline", "--scenario", CASE3, "--out", out, "--method", "bogus"]) == EXIT_CONFIG
    assert main(["simulate-online", "--scenario", str(tmp_path / "none.ini"), "--out", out]) == EXIT_CONFIG
    assert main(["simulate-online", "--scenario", CASE3, "--out", out, "--mu", "-1"]) == EXIT_CONFIG
    assert main(["solve-opf", "--out", out]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_CONFIG


def test_solver_failure_keeps_partial_trace(tmp_path):
    code = main(["simulate-online", "--scenario", CASE3, "--out", str(tmp_path), "--max-iter", "1"])
    assert code == EXIT_SOLVER
    assert (tmp_path / "online_trace.csv").is_file()
    summary = {r["key"]: r["value"] for r in read_csv(tmp_path / "summary.csv")}
    assert summary["online_complete"] == "0" and summary["online_error"]


def test_solve_opf_case2(tmp_path, capsys):
    assert main(["solve-opf", "--case", str(data_path("case2.txt")), "--out", str(tmp_path)]) == EXIT_OK
    vals = kv(capsys.readouterr().out)
    assert vals["status"] == "optimal"
    assert float(vals["rank_gap"]) <= 1e-4
    assert float(vals["flow_residual"]) <= 1e-3
    assert {"v1_mag", "v2_mag", "pg1_mw", "qg1_mvar", "objective"} <= set(vals)


def test_solve_opf_infeasible(tmp_path, capsys):
    code = main(["solve-opf", "--case", str(data_path("case9.txt")), "--load-scale", "10", "--out", str(tmp_path)])
    assert code == EXIT_SOLVER
    out = kv(capsys.readouterr().out)
    assert out["status"] == "infeasible" and out["diagnostic"]


def test_generate_scenario(tmp_path):
    out = tmp_path / "gen"
    assert main(["generate-scenario", "--count", "12", "--seed", "5", "--out", str(out)]) == EXIT_OK
    sc = load_scenario(out / "scenario.ini")
    assert len(sc.pevs) == 12 and sc.seed == 5
    assert main(["generate-scenario", "--count", "-1", "--out", str(out)]) == EXIT_CONFIG


def test_plots_are_svg(tmp_path):
    out = str(tmp_path)
    assert main(["compare", "--run", "--plots", "--scenario", CASE3, "--out", out]) == EXIT_OK
    for name in ("power.svg", "voltage.svg", "charging_load.svg", "offline_charging_load.svg"):
        root = ET.parse(tmp_path / name).getroot()
        assert root.tag.endswith("svg")
        assert root.findall(".//{http://www.w3.org/2000/svg}polyline")


def test_reruns_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["compare", "--run", "--scenario", CASE3, "--out", str(d)]) == EXIT_OK
    for name in ("online_trace.csv", "online_voltages.csv", "online_generation.csv", "offline_trace.csv",
                 "summary.csv", "compare.csv", "compare_load.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "pevmpc", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "pevmpc" in res.stdout
