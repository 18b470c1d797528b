from __future__ import annotations

import json

import pytest

from laminar_sim.cli import EXIT_CONFIG, EXIT_OK, EXIT_VIOLATIONS, main, parse_seeds
from laminar_sim.scenario import TABLE3_COLUMNS


def test_check_shipped_program(capsys):
    assert main(["check-program", "laminar.json"]) == EXIT_OK
    assert "OK" in capsys.readouterr().out


@pytest.mark.parametrize("name,kind", [
    ("forward_read", "ForwardRead"), ("backward_write", "BackwardWrite"), ("double_rmw", "DoubleRMW"),
])
def test_counter_examples_exit_3(name, kind, capsys):
    assert main(["check-program", name]) == EXIT_VIOLATIONS
    assert kind in capsys.readouterr().out


def test_empty_manifest_is_config_error(tmp_path, capsys):
    p = tmp_path / "empty.json"
    p.write_text(json.dumps({"name": "empty", "stages": [], "registers": [], "accesses": []}))
    assert main(["check-program", str(p)]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_bad_scenarios_are_config_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\ntopology: [\n")
    assert main(["run", str(bad)]) == EXIT_CONFIG
    bad.write_text("name: x\ntopology: {kind: ring}\nworkloads: []\n")
    assert main(["run", str(bad)]) == EXIT_CONFIG


def test_run_writes_reports(tmp_path, capsys):
    cfg = tmp_path / "small.yaml"
    cfg.write_text("name: small\ntopology: {kind: pair}\n"
                   "workloads: [{kind: stream, src: h0, dst: h1, bytes: 300000}]\n")
    assert main(["run", str(cfg), "--seed", "2", "--out", str(tmp_path / "out")]) == EXIT_OK
    rep = json.loads((tmp_path / "out" / "small-seed2.json").read_text())
    assert rep["metrics"]["goodput_bps"] > 0 and rep["seed"] == 2
    assert "goodput" in capsys.readouterr().out


def test_fct_study_prints_table(tmp_path, capsys):
    cfg = tmp_path / "mini.yaml"
    cfg.write_text(
        "name: mini\nduration_ms: 5\ntopology: {kind: leaf_spine, spines: 1, leaves: 2, hosts_per_leaf: 2}\n"
        "workloads: [{kind: partition_aggregate, queries: 5, fanout: 2, interval_us: 50}]\n"
        "study: {seeds: 1, fidelities: [0, max], ccs: [dctcp]}\n")
    assert main(["fct-study", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split(",") == TABLE3_COLUMNS and len(lines) == 3
    assert lines[2].startswith("dctcp,max,") and (tmp_path / "mini.csv").exists()


def test_sweep_one_row_per_seed(tmp_path, capsys):
    cfg = tmp_path / "s.yaml"
    cfg.write_text("name: s\ntopology: {kind: pair}\nworkloads: [{kind: stream, src: h0, dst: h1, bytes: 100000}]\n")
    assert main(["sweep", str(cfg), "--seeds", "1..3", "--workers", "1"]) == EXIT_OK
    rows = capsys.readouterr().out.splitlines()
    assert rows[0].startswith("seed,") and [r.split(",")[0] for r in rows[1:]] == ["1", "2", "3"]


def test_seed_ranges():
    assert parse_seeds("1..3") == [1, 2, 3]
    assert parse_seeds("4,9") == [4, 9]
    with pytest.raises(Exception):
        parse_seeds("5..1")
