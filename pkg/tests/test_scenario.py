from __future__ import annotations

import pytest

from laminar_sim.netsim import ConfigError
from laminar_sim.scenario import (
    TABLE3_COLUMNS, build, load_config, parse_config, run_config, scenario_dir, table3_csv,
)

SHIPPED = sorted(p.stem for p in scenario_dir().glob("*.yaml"))


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_scenarios_load_and_build(name):
    cfg = load_config(name)
    assert cfg["name"] == name
    assert build(cfg).net.endpoints


def test_schema_error_names_the_line():
    text = "name: x\ntopology:\n  kind: pair\n  link_gbps: fast\nworkloads: []\n"
    with pytest.raises(ConfigError, match=r"<string>:4: topology/link_gbps"):
        parse_config(text)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match=":1:"):
        parse_config("name: x\nbogus: 1\ntopology: {kind: pair}\nworkloads: []\n")


def test_malformed_yaml_reports_line():
    with pytest.raises(ConfigError, match=r":2: malformed YAML"):
        parse_config("name: x\ntopology: : pair\n")


def test_non_mapping_rejected():
    with pytest.raises(ConfigError):
        parse_config("- 1\n- 2\n")


def test_missing_file():
    with pytest.raises(ConfigError, match="no such scenario"):
        load_config("/nonexistent/thing.yaml")


def test_oversize_message_rejected():
    cfg = load_config("fct_study")
    cfg["workloads"][0]["background_bytes"] = 10 * cfg["host"]["send_buffer"]
    with pytest.raises(ConfigError, match="exceeds"):
        build(cfg)


def test_unknown_host_in_workload():
    cfg = load_config("pair")
    cfg["workloads"][0]["dst"] = "h9"
    with pytest.raises(ConfigError, match="unknown host"):
        build(cfg)


def test_defaults_fill_missing_sections():
    cfg = parse_config("name: x\ntopology: {kind: pair}\nworkloads: [{kind: stream, src: h0, dst: h1}]\n")
    assert cfg["datapath"]["fidelity"] == 1 and cfg["control"]["cc"] == "dctcp"


def test_pair_report_fields():
    cfg = load_config("pair")
    cfg["workloads"][0]["bytes"] = 1_000_000
    rep = run_config(cfg, seed=3)
    m = rep.metrics
    assert m["all_done"] and m["accounting_ok"] and m["goodput_bps"] > 5e9


def test_table3_csv_columns():
    rows = [{"cc": "dctcp", "ooo": "max", "fg_p90_ms": 0.5, "fg_p90_ratio": 1.0, "fg_count": 3}]
    lines = table3_csv(rows).splitlines()
    assert lines[0].split(",") == TABLE3_COLUMNS
    cells = dict(zip(TABLE3_COLUMNS, lines[1].split(",")))
    assert cells["fg_p90_ms"] == "0.5" and cells["bg_p999_ms"] == "" and cells["fg_count"] == "3"
