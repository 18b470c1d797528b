"""Declarative scenarios: YAML loading with line-precise validation errors,
network construction, execution and the fidelity FCT study."""
from __future__ import annotations

import copy
import json
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .netsim import (ConfigError, EchoClient, EchoServer, HostParams, LinkConfig, MessageSource,
                     Network, Sink, StatsReport, StreamSender, build_incast, build_leaf_spine,
                     build_pair, collect_report, percentile)
from .params import DatapathConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "duration_ms": 100.0,
    "warmup_ms": 0.0,
    "drain_ms": 2.0,
    "check_invariants": True,
    "topology": {"link_gbps": 10.0, "delay_us": 2.5, "queue_packets": 1000, "ecn_k": None,
                 "loss": 0.0, "reorder": 0.0, "dup": 0.0, "impair_reverse": True,
                 "degree": 1, "senders": 1, "shaped_gbps": None, "shaper_queue_packets": 1000,
                 "spines": 2, "leaves": 4, "hosts_per_leaf": 4, "fabric_gbps": 10.0},
    "datapath": {"fidelity": 1, "delayed_ack": 1, "sack": False, "rto_us": 10_000,
                 "feedback_depth": 64, "stage_delay_ns": 30, "mirror_to": "egress",
                 "notify_threshold": 16384},
    "control": {"cc": "dctcp", "period_us": 500, "recovery_us": 100},
    "host": {"recovery": "gbn", "rx_buffer": 65536, "send_buffer": 1 << 20, "rtt_us": 20,
             "host_delay_ns": 500, "random_isn": True},
}


def _schema() -> dict:
    text = resources.files("laminar_sim").joinpath("data/scenario.schema.json").read_text()
    return json.loads(text)


def scenario_dir() -> Path:
    return Path(str(resources.files("laminar_sim").joinpath("data/scenarios")))


def resolve_path(path: str | Path) -> Path:
    """A scenario path, falling back to the shipped scenario of the same name."""
    p = Path(path)
    if p.exists():
        return p
    shipped = scenario_dir() / (p.name if p.suffix else p.name + ".yaml")
    if shipped.exists():
        return shipped
    raise ConfigError(f"{path}: no such scenario file")


def _line_of(node: yaml.Node | None, path: list) -> int | None:
    """1-based line of the YAML node reached by ``path``."""
    if node is None:
        return None
    line = node.start_mark.line + 1
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
        line = node.start_mark.line + 1
    return line


def load_config(path: str | Path) -> dict[str, Any]:
    p = resolve_path(path)
    text = p.read_text()
    return parse_config(text, str(p))


def parse_config(text: str, source: str = "<string>") -> dict[str, Any]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: scenario must be a mapping")
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (_line_of(node, list(e.absolute_path)) or 0))
    if errors:
        err = errors[0]
        line = _line_of(node, list(err.absolute_path))
        loc = "/".join(str(x) for x in err.absolute_path) or "<root>"
        raise ConfigError(f"{source}:{line}: {loc}: {err.message}")
    return with_defaults(doc)


def with_defaults(doc: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(DEFAULTS)
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def datapath_config(cfg: dict[str, Any]) -> DatapathConfig:
    d = cfg["datapath"]
    fid = d["fidelity"]
    return DatapathConfig(
        fidelity=None if fid == "max" else int(fid), delayed_ack=d["delayed_ack"], sack=d["sack"],
        rto_ns=int(d["rto_us"] * 1000), feedback_depth=d["feedback_depth"],
        stage_delay=d["stage_delay_ns"], mirror_to=d["mirror_to"],
        notify_threshold=d["notify_threshold"], width=256,
    )


def _link(t: dict[str, Any], gbps: float | None = None, impaired: bool = True,
          queue: int | None = None, ecn: bool = True) -> LinkConfig:
    return LinkConfig(
        rate_bps=(gbps or t["link_gbps"]) * 1e9, delay_ns=int(t["delay_us"] * 1000),
        queue_limit=queue or t["queue_packets"], ecn_k=t["ecn_k"] if ecn else None,
        loss=t["loss"] if impaired else 0.0, reorder=t["reorder"] if impaired else 0.0,
        dup=t["dup"] if impaired else 0.0,
    )


@dataclass
class Built:
    net: Network
    hosts: list[str]
    cfg: dict[str, Any]


def build(cfg: dict[str, Any], seed: int | None = None) -> Built:
    seed = cfg["seed"] if seed is None else seed
    net = Network(seed, cfg["check_invariants"])
    dp = datapath_config(cfg)
    ctl = cfg["control"]
    t = cfg["topology"]
    kind = t["kind"]
    if kind == "pair":
        hosts = build_pair(net, dp, ctl, _link(t), t["impair_reverse"])
    elif kind == "incast":
        shaped = t["shaped_gbps"] or t["link_gbps"] / t["degree"]
        hosts = build_incast(net, dp, ctl, t["senders"], _link(t, ecn=False),
                             _link(t, shaped, queue=t["shaper_queue_packets"]))
    else:
        hosts = build_leaf_spine(net, dp, ctl, t["spines"], t["leaves"], t["hosts_per_leaf"],
                                 _link(t), _link(t, t["fabric_gbps"]))
    h = cfg["host"]
    hp = HostParams(recovery=h["recovery"], rx_buffer=h["rx_buffer"], send_buffer=h["send_buffer"],
                    rtt_base_ns=int(h["rtt_us"] * 1000), line_rate_bps=t["link_gbps"] * 1e9,
                    host_delay_ns=h["host_delay_ns"], random_isn=h["random_isn"])
    for ep in net.endpoints.values():
        ep.host_delay = hp.host_delay_ns
    rng = random.Random(f"workload:{seed}")
    for i, w in enumerate(cfg["workloads"]):
        _add_workload(net, hosts, hp, w, rng, f"w{i}")
    return Built(net, hosts, cfg)


def _check_host(hosts: list[str], name: str) -> str:
    if name not in hosts:
        raise ConfigError(f"unknown host {name!r}; topology has {', '.join(hosts)}")
    return name


def _add_workload(net: Network, hosts: list[str], hp: HostParams, w: dict[str, Any],
                  rng: random.Random, wid: str) -> None:
    kind = w["kind"]
    if kind == "stream":
        srcs = w["src"]
        if srcs == "*":
            srcs = [x for x in hosts if x != w["dst"]]
        elif isinstance(srcs, str):
            srcs = [srcs]
        dst = _check_host(hosts, w["dst"])
        rate = w.get("rate_gbps")
        sink_rate = w.get("sink_gbps")
        for s in srcs:
            _check_host(hosts, s)
            if s == dst:
                raise ConfigError(f"stream source and destination are both {s}")
            k = w.get("connections", 1)
            for i in range(k):
                a, b = net.connect(s, dst, hp)
                total = w.get("bytes")
                start = int(w.get("start_us", 0) * 1000)
                if rate:
                    start += i * 2_000 // k  # spread the pacing phases
                net.add_app(a, StreamSender(a, total, start, rate * 1e9 if rate else None))
                net.add_app(b, Sink(b, total, sink_rate * 1e9 if sink_rate else None))
    elif kind == "echo":
        c, s = _check_host(hosts, w["client"]), _check_host(hosts, w["server"])
        req, resp = w.get("request_bytes", 64), w.get("response_bytes", 64)
        for _ in range(w.get("connections", 1)):
            a, b = net.connect(c, s, hp)
            net.add_app(a, EchoClient(a, req, resp, w.get("inflight", 1), w.get("count"),
                                      int(w.get("start_us", 0) * 1000), w.get("warmup", 0)))
            net.add_app(b, EchoServer(b, req, resp))
    else:
        _partition_aggregate(net, hosts, hp, w, rng)


def _partition_aggregate(net: Network, hosts: list[str], hp: HostParams, w: dict[str, Any],
                         rng: random.Random) -> None:
    """Foreground incast queries over background bulk messages between host pairs."""
    fanout = min(w.get("fanout", 8), len(hosts) - 1)
    size = w.get("response_bytes", 8192)
    interval = int(w.get("interval_us", 200) * 1000)
    start = int(w.get("start_us", 0) * 1000)
    plan: dict[tuple[str, str], dict[str, list[tuple[int, int]]]] = {}
    for q in range(w.get("queries", 100)):
        agg = rng.choice(hosts)
        t = start + q * interval + rng.randrange(interval // 2 + 1)
        for wk in rng.sample([x for x in hosts if x != agg], fanout):
            plan.setdefault((wk, agg), {}).setdefault("foreground", []).append((t, size))
    nbg = w.get("background_flows", 0)
    bsize = w.get("background_bytes", 1_000_000)
    if max(size, bsize) > hp.send_buffer:
        raise ConfigError(f"message of {max(size, bsize)} bytes exceeds the {hp.send_buffer} byte send buffer")
    binterval = int(w.get("background_interval_us", 1000) * 1000)
    horizon = start + w.get("queries", 100) * interval
    for _ in range(nbg):
        src, dst = rng.sample(hosts, 2)
        t = start + rng.randrange(binterval)
        while t < horizon:
            plan.setdefault((src, dst), {}).setdefault("background", []).append((t, bsize))
            t += binterval
    conns: dict[frozenset, tuple] = {}
    for (src, dst), classes in sorted(plan.items()):
        key = frozenset((src, dst))
        if key not in conns:
            a, b = net.connect(src, dst, hp)
            conns[key] = (a, b)
            net.add_app(a, Sink(a))
            net.add_app(b, Sink(b))
        a, b = conns[key]
        h = a if a.ep.name == src else b
        for tag, items in sorted(classes.items()):
            net.add_app(h, MessageSource(h, items, tag))


def run_config(cfg: dict[str, Any], seed: int | None = None, duration_ms: float | None = None) -> StatsReport:
    b = build(cfg, seed)
    net = b.net
    dur = int((duration_ms if duration_ms is not None else cfg["duration_ms"]) * 1e6)
    warm = int(cfg["warmup_ms"] * 1e6)
    if warm:
        net.sim.at(warm, net.snapshot_sinks)
    end = net.run(dur, int(cfg["drain_ms"] * 1e6))
    rep = collect_report(net, cfg["name"], end)
    problems = net.check_accounting() if net.quiescent() and net.t_all_done is not None else []
    rep.metrics["accounting_ok"] = not problems
    rep.metrics["all_done"] = net.t_all_done is not None
    return rep


# -- fidelity FCT study ---------------------------------------------------------

FIDELITIES = (0, 1, 2, "max")


def fct_study(cfg: dict[str, Any], seeds: list[int], fidelities=FIDELITIES,
              ccs: tuple[str, ...] = ("aimd", "dctcp"), workers: int = 1) -> list[dict[str, Any]]:
    """Pooled FCT percentiles per (cc, fidelity) with ratios against OOO-max.

    OOO-0 pairs with go-back-N sender recovery, higher fidelities with SACK.
    """
    jobs = []
    for cc in ccs:
        for fid in fidelities:
            c = copy.deepcopy(cfg)
            c["control"]["cc"] = cc
            c["datapath"]["fidelity"] = fid
            sel = fid != 0
            c["datapath"]["sack"] = sel
            c["host"]["recovery"] = "sack" if sel else "gbn"
            for s in seeds:
                jobs.append(((cc, fid), c, s))
    results = _map_runs([(c, s) for _, c, s in jobs], workers)
    pooled: dict[tuple, dict[str, list[float]]] = {}
    for (key, _, _), rep in zip(jobs, results):
        d = pooled.setdefault(key, {})
        for cls, vals in rep["fct_samples"].items():
            d.setdefault(cls, []).extend(vals)
    rows = []
    for cc in ccs:
        base = pooled.get((cc, "max"), {})
        for fid in fidelities:
            d = pooled.get((cc, fid), {})
            row: dict[str, Any] = {"cc": cc, "ooo": str(fid)}
            for cls, short in (("foreground", "fg"), ("background", "bg")):
                vals = d.get(cls, [])
                row[f"{short}_count"] = len(vals)
                for q, name in ((90, "p90"), (99.9, "p999")):
                    v = percentile(vals, q)
                    b = percentile(base.get(cls, []), q)
                    row[f"{short}_{name}_ms"] = None if v is None else v / 1e6
                    row[f"{short}_{name}_ratio"] = None if v is None or not b else v / b
            rows.append(row)
    return rows


def study_plan(cfg: dict[str, Any], seeds: list[int] | None = None) -> tuple[list[int], tuple, tuple]:
    """Seeds, fidelities and CC policies of a scenario's ``study`` section."""
    st = cfg.get("study") or {}
    if seeds is None:
        sd = st.get("seeds", 5)
        seeds = list(range(cfg["seed"], cfg["seed"] + sd)) if isinstance(sd, int) else list(sd)
    return seeds, tuple(st.get("fidelities", FIDELITIES)), tuple(st.get("ccs", ("aimd", "dctcp")))


def run_study(cfg: dict[str, Any], seeds: list[int] | None = None, workers: int = 1) -> list[dict[str, Any]]:
    seeds, fids, ccs = study_plan(cfg, seeds)
    return fct_study(cfg, seeds, fids, ccs, workers)


def run_for_samples(args: tuple[dict[str, Any], int]) -> dict[str, Any]:
    cfg, seed = args
    b = build(cfg, seed)
    net = b.net
    net.run(int(cfg["duration_ms"] * 1e6), int(cfg["drain_ms"] * 1e6))
    samples: dict[str, list[int]] = {}
    for h in net.handles:
        for m in h.host.messages:
            if m.tag and m.fct is not None:
                samples.setdefault(m.tag, []).append(m.fct)
    return {"fct_samples": samples}


def _map_runs(args: list, workers: int) -> list:
    if workers <= 1:
        return [run_for_samples(a) for a in args]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_for_samples, args))


TABLE3_COLUMNS = ["cc", "ooo", "fg_p90_ms", "fg_p90_ratio", "fg_p999_ms", "fg_p999_ratio",
                  "bg_p90_ms", "bg_p90_ratio", "bg_p999_ms", "bg_p999_ratio", "fg_count", "bg_count"]


def table3_csv(rows: list[dict[str, Any]]) -> str:
    out = [",".join(TABLE3_COLUMNS)]
    for r in rows:
        cells = []
        for c in TABLE3_COLUMNS:
            v = r.get(c)
            cells.append("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"
