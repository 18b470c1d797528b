"""Shared drivers for the property and acceptance suites."""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from laminar_sim import seqnum
from laminar_sim.control import ConnConfig, ControlPlane
from laminar_sim.host import DoubleMappedBuffer, OracleReassembler, pattern
from laminar_sim.netsim import (HostParams, InvariantViolation, LinkConfig, Network, Sink, StreamSender, build_pair)
from laminar_sim.params import DatapathConfig
from laminar_sim.pipeline import build_laminar_program
from laminar_sim.rmt import PHV, EventKind

FLOW = 11


class Quiescent:
    """One receive pipeline driven to quiescence after every segment.

    Feedback ops are traversed immediately and out-of-window exceptions are
    recovered at once, so each arrival sees a settled state.
    """

    def __init__(self, fidelity: int | None, rx_size: int = 16384, isn: int = 0, sack: bool = False,
                 rto_ns: int = 10_000_000, peer_window: int = 65536):
        self.program = build_laminar_program(DatapathConfig(fidelity=fidelity, sack=sack, width=4, rto_ns=rto_ns))
        self.cp = ControlPlane(self.program)
        self.conn = self.cp.establish(ConnConfig(flow=FLOW, isn_rx=isn, isn_tx=0, rx_size=rx_size,
                                                     peer_rx_size=peer_window))
        self.isn = isn
        self.rx_size = rx_size
        self.traversals = 0
        self.exceptions = 0
        self.after_traversal = None  # optional callback(program, conn)
        self.mem = DoubleMappedBuffer(rx_size)
        self.acks: list[PHV] = []

    def _run(self, phv: PHV) -> list:
        """Traverse ``phv`` and its feedback; returns the first traversal's notifications."""
        pending = [phv]
        notes = None
        while pending:
            res = self.program.traverse(pending.pop(0))
            self.traversals += 1
            if self.after_traversal is not None and not res.dropped:
                self.after_traversal(self.program, self.conn)
            if notes is None:
                notes = res.notifications
            for n in res.notifications:
                if "dma" in n.fields:
                    self.mem.write(n.fields["dma"][0], bytes(n.fields["data"]))
            self.acks.extend(e for e in res.emitted if e.len == 0)
            pending.extend(op.phv for op in res.feedback)
            for exc in res.exceptions:
                self.exceptions += 1
                if self.cp.on_exception(exc.kind, exc.conn_id) is not None:
                    pending.extend(self.cp.recover_oow(exc.conn_id))
        return notes

    def holds(self, offset: int, n: int) -> bool:
        """Whether ``[offset, offset+n)`` is already below the frontier or inside an island."""
        if offset + n <= self.frontier:
            return True
        for s, e in self.program.ooo_intervals(self.conn):
            if seqnum.diff(s, self.isn) <= offset and offset + n <= seqnum.diff(e, self.isn):
                return True
        return False

    def segment(self, offset: int, n: int) -> bool:
        """Feed ``[offset, offset+n)``; True when its bytes end up held (placed or already present)."""
        held = self.holds(offset, n)
        phv = PHV(EventKind.RX, seq=seqnum.add(self.isn, offset), len=n, flow=FLOW,
                  payload=pattern(offset, n))
        placed = any("dma" in x.fields for x in self._run(phv))
        return held or placed

    @property
    def frontier(self) -> int:
        return seqnum.diff(self.program.cp_read("next_seq", self.conn), self.isn)


def random_trace(rng: random.Random, rx_size: int, mss: int = 1460) -> list[tuple[int, int]]:
    """Segments of a stream cut at MSS boundaries, shuffled with drops and duplicates."""
    total = rng.randint(rx_size // 2, 2 * rx_size)
    segs = [(o, min(mss, total - o)) for o in range(0, total, mss)]
    out = []
    for s in segs:
        r = rng.random()
        if r < 0.15:
            continue
        out.append(s)
        if r > 0.9:
            out.append(s)
    # local shuffles: reordering distance of a few segments
    for i in range(len(out)):
        j = min(len(out) - 1, i + rng.randint(0, 4))
        if rng.random() < 0.3:
            out[i], out[j] = out[j], out[i]
    # a few odd-sized fragments that straddle segment boundaries
    for _ in range(rng.randint(0, 3)):
        o = rng.randrange(0, total)
        out.insert(rng.randrange(len(out) + 1), (o, min(rng.randint(1, mss), total - o)))
    return [s for s in out if s[1] > 0]


def oracle_accepts(oracle: OracleReassembler, offset: int, n: int, right: int) -> bool:
    """Oracle accept rule: anything inside the receive window."""
    return oracle.accept(offset, n, pattern(offset, n), right)


@dataclass
class StreamCase:
    seed: int
    loss: float
    reorder: float
    dup: float
    fidelity: int
    recovery: str
    nbytes: int
    cc: str = "dctcp"


@dataclass
class StreamOutcome:
    case: StreamCase
    delivered: bool
    accounting: list[str] = field(default_factory=list)
    traversals: int = 0
    checks: int = 0
    violation: str = ""
    quiescent: bool = False

    @property
    def ok(self) -> bool:
        return self.delivered and self.quiescent and not self.accounting and not self.violation


def random_case(rng: random.Random, seed: int) -> StreamCase:
    return StreamCase(
        seed=seed, loss=rng.uniform(0, 0.05), reorder=rng.uniform(0, 0.10), dup=rng.uniform(0, 0.02),
        fidelity=rng.choice((0, 1, 2)), recovery=rng.choice(("gbn", "sack")),
        nbytes=rng.randint(50_000, 500_000),
    )


def run_stream(case: StreamCase, rto_ns: int = 200_000, limit_ns: int = 2_000_000_000) -> StreamOutcome:
    """One lossy pair transfer; invariants are checked after every traversal."""
    net = Network(case.seed, check_invariants=True)
    sack = case.recovery == "sack"
    dp = DatapathConfig(fidelity=case.fidelity, sack=sack, rto_ns=rto_ns, width=4)
    link = LinkConfig(10e9, 2_000, 1000, None, case.loss, case.reorder, case.dup)
    build_pair(net, dp, {"cc": case.cc, "period_us": 100}, link)
    hp = HostParams(recovery=case.recovery, rx_buffer=16384, send_buffer=1 << 18, rtt_base_ns=10_000)
    a, b = net.connect("h0", "h1", hp)
    net.add_app(a, StreamSender(a, case.nbytes))
    sink = net.add_app(b, Sink(b, case.nbytes))
    try:
        net.run(limit_ns, drain_ns=5_000_000)
    except InvariantViolation as exc:
        return StreamOutcome(case, False, violation=str(exc))
    out = StreamOutcome(case, sink.done and sink.received == case.nbytes)
    out.traversals = sum(ep.stats["traversals"] for ep in net.endpoints.values())
    out.checks = sum(ep.stats["invariant_checks"] for ep in net.endpoints.values())
    out.quiescent = net.quiescent()
    out.accounting = net.check_accounting() if out.quiescent else ["not quiescent"]
    return out
