import json
import logging
import subprocess
import sys

import pytest
import yaml

from bcmon import cli, harness
from bcmon.harness import Scenario, ScenarioError, check_determinism, parse_axis, run, sweep

SMALL = {"name": "small", "seed": 5, "chains": [{"id": "A", "block_ms": 200}], "clients": {"count": 2},
         "workload": {"script": [{"op": "open", "amount": 40}, {"op": "pay", "count": 3}, {"op": "close"}]}}


@pytest.fixture
def small_file(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


# --- scenarios ---------------------------------------------------------------

@pytest.mark.parametrize("bad,msg", [
    ({"committee": {"n": 3, "f": 1}}, r"3f\+1"),
    ({"nope": 1}, "unknown"),
    ({"committee": {"quorum": 3}}, "unknown"),
    ({"network": "LTE"}, "LTE"),
    ({"faults": [{"node": 9, "crash_at_ms": 1}]}, "unknown node"),
    ({"faults": [{"node": 0, "byzantine": "evil"}]}, "byzantine"),
    ({"workload": {"script": [{"op": "dance"}]}}, "op"),
    ({"workload": {"script": [{"op": "xchain", "src": "A", "to": [["Z", "x"]]}]}}, "unknown chain"),
    ({"clients": {"gateway": 4}}, "gateway"),
])
def test_invalid_scenarios(bad, msg):
    with pytest.raises(ScenarioError, match=msg):
        Scenario.from_dict({**SMALL, **bad})


def test_transactions_split_across_clients():
    sc = Scenario.from_dict({**SMALL, "clients": {"count": 3},
                             "workload": {**SMALL["workload"], "transactions": 10}})
    pays = [sum(e["count"] for e in s if e["op"] == "pay") for s in sc.scripts()]
    assert sum(pays) == 10 and max(pays) - min(pays) <= 1


def test_axis_aliases_and_parse():
    assert parse_axis("nodes=4:9:1") == ("nodes", [4, 5, 6, 7, 8, 9])
    assert parse_axis("clients=10,20") == ("clients", [10, 20])
    sc = Scenario.from_dict(SMALL).with_value("nodes", 7).with_value("payload_size", 640)
    assert sc.n == 7 and sc.f == 2 and sc["ledger"]["payload_bytes"] == 640
    for bad in ("nodes", "nodes=1:3:0", "nodes="):
        with pytest.raises(ScenarioError):
            parse_axis(bad)


def test_same_seed_identical_reports_and_traces():
    a, b = run(SMALL), run(SMALL)
    assert a.report_json() == b.report_json() and a.trace_lines() == b.trace_lines()
    c = run({**SMALL, "seed": 6})
    assert c.trace_lines() != a.trace_lines()


def test_sequential_and_parallel_agree():
    assert check_determinism(SMALL) == (True, "identical")


def test_report_metrics_present():
    rep = run({**SMALL, "wall_clock": True, "committee": {"buffer": 0, "timeout_ms": 0}}).report
    assert rep["timings"]["open_total_ms"]["n"] == 2
    assert rep["timings"]["offchain_service_ms"]["n"] == 6
    assert rep["timings"]["update_total_ms"]["n"] >= 1
    assert rep["wall_s"] >= 0 and not rep["violations"]


def test_empty_axis_is_single_run(tmp_path):
    out = tmp_path / "rows.jsonl"
    rows = sweep(SMALL, [], out_path=out)
    assert len(rows) == 1 and len(out.read_text().splitlines()) == 1


def test_payload_sweep_increases_process_time():
    tmpl = {**SMALL, "clients": {"count": 1}, "chains": [{"id": "A", "block_ms": 50}],
            "workload": {"script": [{"op": "task", "kind": 1, "target": "filler:0", "window": [1, 10],
                                     "sources": ["A"]}]}}
    rows = sweep(tmpl, [("payload_size", [0, 1_000_000, 4_000_000])])
    times = [r["cpbs_process_ms"] for r in rows]
    assert times == sorted(times) and times[0] < times[-1]


# --- cli ---------------------------------------------------------------------

@pytest.mark.parametrize("args,out", [
    (["4", "1", "3", "1"], "0.750000"),
    (["4", "0", "3", "1"], "0.000000"),
    (["7", "2", "5", "2"], "0.476190"),
])
def test_cli_faultprob(capsys, args, out):
    assert cli.main(["faultprob", *args]) == 0
    assert capsys.readouterr().out.strip() == out


def test_cli_faultprob_exact_and_bad_input(capsys):
    assert cli.main(["faultprob", "7", "2", "5", "2", "--exact"]) == 0
    assert capsys.readouterr().out.split() == ["0.476190", "10/21"]
    assert cli.main(["faultprob", "4", "5", "3", "1"]) == 2


def test_cli_run_writes_outputs(tmp_path, small_file, capsys):
    rep, trace = tmp_path / "r.json", tmp_path / "t.jsonl"
    assert cli.main(["run", str(small_file), "--out", str(rep), "--trace", str(trace)]) == 0
    data = json.loads(rep.read_text())
    assert data["name"] == "small" and data["violations"] == []
    assert all(json.loads(line) for line in trace.read_text().splitlines())
    assert "violations: none" in capsys.readouterr().out


def test_cli_run_determinism_flag(small_file, capsys):
    assert cli.main(["run", str(small_file), "--check-determinism"]) == 0
    assert "determinism: identical" in capsys.readouterr().out


def test_cli_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**SMALL, "committee": {"n": 2, "f": 1}}))
    assert cli.main(["run", str(bad)]) == 2
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 2
    assert cli.main(["bogus"]) == 2
    assert cli.main(["sweep", str(bad), "--axis", "nodes"]) == 2


def test_cli_violation_exit_code(small_file, monkeypatch, capsys):
    monkeypatch.setattr(harness, "audit_conservation", lambda world: ["injected"])
    assert cli.main(["run", str(small_file)]) == 1
    assert "injected" in capsys.readouterr().out
    assert cli.main(["sweep", str(small_file), "--axis", "clients=1,2"]) == 1


def test_cli_sweep_table(small_file, tmp_path, capsys):
    out = tmp_path / "rows.jsonl"
    assert cli.main(["sweep", str(small_file), "--axis", "nodes=4,5", "--out", str(out)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[0] == "nodes" and len(table) == 3
    assert len(out.read_text().splitlines()) == 2


def test_log_env_var(small_file):
    proc = subprocess.run([sys.executable, "-m", "bcmon.cli", "run", str(small_file)],
                          env={"BCMON_LOG": "INFO", "PATH": ""}, capture_output=True, text=True)
    assert proc.returncode == 0
    assert "INFO bcmon.harness" in proc.stderr
    quiet = subprocess.run([sys.executable, "-m", "bcmon.cli", "run", str(small_file)],
                           env={"PATH": ""}, capture_output=True, text=True)
    assert quiet.stderr == ""
