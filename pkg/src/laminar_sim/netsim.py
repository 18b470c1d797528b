"""Deterministic discrete-event packet network around Laminar endpoints.

Links are closed-form FIFOs (departure times only), switches forward with
per-flow ECMP, and every endpoint owns one pipeline, its control plane and
the host library instances of its connections.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Callable

from . import seqnum
from .control import ConnConfig, ControlPlane, Policy
from .host import HostConnection, PayloadMismatch
from .params import ACK_WIRE_BYTES, WIRE_OVERHEAD, DatapathConfig
from .pipeline import LaminarProgram, build_laminar_program
from .rmt import EventKind, Flag, FeedbackPort, PHV
from .tx import SyncSchedule

log = logging.getLogger("laminar_sim")


class ConfigError(ValueError):
    """Inconsistent topology or workload description."""


class InvariantViolation(AssertionError):
    """A data-path or accounting invariant failed during a run."""


# -- event loop -----------------------------------------------------------------

class Simulator:
    def __init__(self) -> None:
        self.now = 0
        self._heap: list = []
        self._n = 0
        self.events = 0

    def at(self, t: int, fn: Callable, *args: Any) -> None:
        if t < self.now:
            t = self.now
        self._n += 1
        heapq.heappush(self._heap, (t, self._n, fn, args))

    def run(self, until: int, stop: Callable[[], bool] | None = None) -> None:
        heap = self._heap
        pop = heapq.heappop
        while heap and heap[0][0] <= until:
            t, _, fn, args = pop(heap)
            self.now = t
            self.events += 1
            fn(*args)
            if stop is not None and stop():
                break

    @property
    def pending(self) -> int:
        return len(self._heap)


# -- links and switches ---------------------------------------------------------

@dataclass(slots=True)
class Packet:
    phv: PHV
    flow: int
    dst: str
    size: int


@dataclass
class LinkConfig:
    rate_bps: float = 10e9  # bits per second
    delay_ns: int = 5_000
    queue_limit: int = 1000  # packets
    ecn_k: int | None = None  # mark CE when the queue holds more than K packets
    loss: float = 0.0
    reorder: float = 0.0
    dup: float = 0.0


@dataclass
class LinkStats:
    injected: int = 0
    delivered: int = 0
    dropped_loss: int = 0
    dropped_queue: int = 0
    duplicated: int = 0
    ecn_marked: int = 0
    max_queue: int = 0
    bytes_delivered: int = 0


class Link:
    """Unidirectional link: FIFO queue, serialization, propagation, impairments."""

    def __init__(self, sim: Simulator, name: str, cfg: LinkConfig, seed: int,
                 deliver: Callable[[Packet], None]):
        self.sim = sim
        self.name = name
        self.cfg = cfg
        self.rng = random.Random(f"{seed}:{name}")
        self.deliver = deliver
        self.ns_per_byte = 8e9 / cfg.rate_bps
        self.busy_until = 0
        self.departures: deque[int] = deque()
        self.stats = LinkStats()
        self.in_flight = 0
        self._impaired = cfg.loss > 0 or cfg.reorder > 0 or cfg.dup > 0
        # optional targeted loss, counted as a random drop
        self.drop: Callable[[Packet], bool] | None = None

    def send(self, pkt: Packet, t: int | None = None) -> None:
        cfg, st = self.cfg, self.stats
        t = self.sim.now if t is None else t
        st.injected += 1
        q = self.departures
        while q and q[0] <= t:
            q.popleft()
        qlen = len(q)
        if qlen >= cfg.queue_limit:
            st.dropped_queue += 1
            return
        if cfg.ecn_k is not None and qlen > cfg.ecn_k and pkt.phv.len > 0:
            pkt.phv.flags |= Flag.CE
            st.ecn_marked += 1
        ser = int(math.ceil(pkt.size * self.ns_per_byte))
        depart = max(t, self.busy_until) + ser
        self.busy_until = depart
        q.append(depart)
        if qlen + 1 > st.max_queue:
            st.max_queue = qlen + 1
        arrive = depart + cfg.delay_ns
        if self.drop is not None and self.drop(pkt):
            st.dropped_loss += 1
            return
        if self._impaired:
            rng = self.rng
            if cfg.loss and rng.random() < cfg.loss:
                st.dropped_loss += 1
                return
            if cfg.reorder and rng.random() < cfg.reorder:
                arrive += int(rng.uniform(1.0, 4.0) * ser)
            if cfg.dup and rng.random() < cfg.dup:
                st.duplicated += 1
                p2 = pkt.phv.wire_copy()
                self.in_flight += 1
                self.sim.at(arrive + ser, self._arrive, Packet(p2, pkt.flow, pkt.dst, pkt.size))
        self.in_flight += 1
        self.sim.at(arrive, self._arrive, pkt)

    def _arrive(self, pkt: Packet) -> None:
        self.in_flight -= 1
        self.stats.delivered += 1
        self.stats.bytes_delivered += pkt.size
        self.deliver(pkt)

    def conserved(self) -> bool:
        st = self.stats
        return (st.injected + st.duplicated
                == st.delivered + st.dropped_loss + st.dropped_queue + self.in_flight)


def _flow_hash(flow: int, salt: int) -> int:
    return ((flow * 2654435761) ^ (salt * 40503)) & 0xFFFFFFFF


class Switch:
    def __init__(self, sim: Simulator, name: str, salt: int):
        self.sim = sim
        self.name = name
        self.salt = salt
        self.routes: dict[str, list[Link]] = {}

    def add_route(self, dst: str, link: Link) -> None:
        self.routes.setdefault(dst, []).append(link)

    def receive(self, pkt: Packet) -> None:
        links = self.routes.get(pkt.dst)
        if not links:
            raise ConfigError(f"switch {self.name} has no route to {pkt.dst}")
        link = links[0] if len(links) == 1 else links[_flow_hash(pkt.flow, self.salt) % len(links)]
        link.send(pkt)


# -- endpoints ------------------------------------------------------------------

class App:
    """Workload driver attached to one connection end."""

    finite = False
    done = False

    def start(self, ep: "Endpoint", now: int) -> None:
        pass

    def on_event(self, ep: "Endpoint", now: int) -> None:
        pass


@dataclass
class ConnHandle:
    ep: "Endpoint"
    conn: int
    host: HostConnection
    out_flow: int
    dst: str
    peer: "ConnHandle | None" = None
    apps: list[App] = field(default_factory=list)


class Endpoint:
    """A host with its Laminar pipeline, control plane and host library."""

    def __init__(self, net: "Network", name: str, cfg: DatapathConfig, policy: Policy,
                 period_ns: int, recovery_ns: int, host_delay_ns: int = 500):
        self.net = net
        self.sim = net.sim
        self.name = name
        self.cfg = cfg
        self.program: LaminarProgram = build_laminar_program(cfg)
        self.port = FeedbackPort(cfg.feedback_depth)
        self.schedule = SyncSchedule(mss=cfg.mss)
        self.cp = ControlPlane(self.program, self.schedule, policy, period_ns, recovery_ns)
        self.host_delay = host_delay_ns
        self.uplink: Link | None = None
        self.conns: dict[int, ConnHandle] = {}
        self.stats: Counter = Counter()
        self._sync_armed: set[int] = set()
        self._check = net.check_invariants
        self._bounded = cfg.fidelity
        self._started_poll = False

    # -- wiring --
    def attach(self, h: ConnHandle) -> None:
        self.conns[h.conn] = h
        if not self._started_poll:
            self._started_poll = True
            self.sim.at(self.sim.now + self.cp.period_ns, self._poll)

    # -- pipeline driver --
    def process(self, phv: PHV) -> None:
        now = self.sim.now
        res = self.program.traverse(phv, now)
        self.stats["traversals"] += 1
        t = now + res.latency
        conn = phv.conn_id
        if res.emitted:
            h = self.conns.get(conn)
            for out in res.emitted:
                size = out.len + WIRE_OVERHEAD if out.len else ACK_WIRE_BYTES
                out.kind = EventKind.RX
                out.conn_id = 0
                self.uplink.send(Packet(out, h.out_flow, h.dst, size), t)
        for op in res.feedback:
            self.stats["pseudo_" + op.phv.kind.name.lower()] += 1
            if self.port.inject(op, now):
                self.sim.at(t + op.delay, self._reenter, op.phv)
            else:
                self.stats["pseudo_dropped"] += 1
        if res.notifications:
            self.sim.at(t + self.host_delay, self._deliver, res.notifications)
        for exc in res.exceptions:
            self.stats["exc_" + exc.kind] += 1
            log.debug("%d %s/%d exception %s %s", now, self.name, exc.conn_id, exc.kind, exc.fields)
            d = self.cp.on_exception(exc.kind, exc.conn_id)
            if d is not None:
                self.sim.at(now + d, self._recover, exc.conn_id)
        if self._check and not res.dropped:
            self.stats["invariant_checks"] += 1
            self.check_intervals(conn)

    def receive(self, pkt: Packet) -> None:
        phv = pkt.phv
        phv.kind = EventKind.RX
        phv.flow = pkt.flow
        phv.conn_id = 0
        self.process(phv)

    def _reenter(self, phv: PHV) -> None:
        self.port.complete()
        self.process(phv)

    def _recover(self, conn: int) -> None:
        log.debug("%d %s/%d restoring window from checkpoint", self.sim.now, self.name, conn)
        for phv in self.cp.recover_oow(conn):
            self.process(phv)

    def _deliver(self, notifs) -> None:
        now = self.sim.now
        touched: list[int] = []
        for n in notifs:
            h = self.conns.get(n.conn_id)
            if h is None:
                continue
            if n.kind == "rx":
                h.host.on_rx(n.fields, now)
            else:
                if n.fields.get("rtx") or n.fields.get("fast_retx"):
                    log.debug("%d %s/%d %s una=%d", now, self.name, n.conn_id,
                              "timeout" if n.fields.get("rtx") else "fast retransmit", n.fields["una"])
                h.host.on_tx(n.fields, now)
            if n.conn_id not in touched:
                touched.append(n.conn_id)
        for c in touched:
            h = self.conns[c]
            for app in h.apps:
                app.on_event(self, now)
            self.flush(c)

    def flush(self, conn: int) -> None:
        """Push whatever the host library may transmit now."""
        h = self.conns[conn]
        out = h.host.push(self.sim.now)
        if out:
            self.schedule.note_activity(conn, self.sim.now)
            for phv in out:
                self.process(phv)

    # -- socket-like surface used by the workload drivers --
    def send(self, conn: int, data: bytes | int, tag: str = "") -> None:
        h = self.conns[conn]
        h.host.app_send(data, self.sim.now, tag)
        self.poke(conn)
        self.flush(conn)

    def recv(self, conn: int, max_bytes: int | None = None) -> bytes:
        h = self.conns[conn]
        data, syncs = h.host.app_recv(max_bytes)
        for phv in syncs:
            self.process(phv)
        return data

    def poke(self, conn: int) -> None:
        now = self.sim.now
        self.schedule.resume(conn, now)
        self.schedule.note_activity(conn, now)
        if conn not in self._sync_armed:
            self._sync_armed.add(conn)
            self.sim.at(now, self._sync, conn)

    # -- packet generator and control plane timers --
    def _sync(self, conn: int) -> None:
        e = self.schedule.entries.get(conn)
        if e is None or not e.active:
            self._sync_armed.discard(conn)
            return
        now = self.sim.now
        p = self.program
        idle = now - e.last_activity > self.schedule.idle_rtts * e.rtt_ns
        if idle and p.cp_read("snd_una", conn) == p.cp_read("snd_nxt", conn) \
                and self.conns[conn].host.backlog == 0:
            e.active = False
            self._sync_armed.discard(conn)
            self.stats["sync_paused"] += 1
            log.debug("%d %s/%d SYNC paused (idle)", now, self.name, conn)
            return
        nxt = p.cp_read("snd_nxt", conn)
        if p.cp_read("credits", conn) >= p.cp_read("credit_cap", conn) \
                and p.cp_read("snd_una", conn) == nxt \
                and seqnum.diff(p.cp_read("peer_right", conn), nxt) >= self.cfg.mss:
            # the traversal would change nothing: credits are full and neither
            # the retransmission nor the persist timer can run
            self.stats["syncs_elided"] += 1
        else:
            self.stats["syncs"] += 1
            self.process(PHV(EventKind.SYNC, conn, flags=Flag.GEN, credit=e.credits_per_sync))
        self.sim.at(now + e.interval, self._sync, conn)

    def _poll(self) -> None:
        for phv in self.cp.poll(self.sim.now):
            self.stats["ack_flush"] += 1
            self.process(phv)
        if not self.net.finished:
            self.sim.at(self.sim.now + self.cp.period_ns, self._poll)

    # -- invariants --
    def check_intervals(self, conn: int) -> None:
        n = self._bounded
        p = self.program
        if p.cp_read("avail", conn) < 0 and not p.cp_read("oow", conn):
            raise InvariantViolation(f"{self.name}/{conn}: negative avail outside recovery")
        if n is None:
            ivs = p.ooo_table.get(conn, [])
            for a, b in zip(ivs, ivs[1:]):
                if not seqnum.lt(a[1], b[0]):
                    raise InvariantViolation(f"{self.name}/{conn}: unordered islands {ivs}")
            return
        prev = 0
        inactive = False
        for i in range(1, n + 1):
            t = p.cp_read(f"ooo_tail_{i}", conn)
            hd = p.cp_read(f"ooo_head_{i}", conn)
            if t == 0:
                inactive = True
                continue
            if inactive:
                raise InvariantViolation(f"{self.name}/{conn}: hole before slot {i}")
            if not 0 <= hd < t:
                raise InvariantViolation(f"{self.name}/{conn}: slot {i} head {hd} tail {t}")
            if t < prev:
                raise InvariantViolation(f"{self.name}/{conn}: slot {i} out of order")
            prev = t


# -- workloads ------------------------------------------------------------------

class StreamSender(App):
    """Bulk transfer of ``total`` bytes (None: unbounded), optionally paced."""

    def __init__(self, h: ConnHandle, total: int | None, start_ns: int = 0,
                 rate_bps: float | None = None, tick_ns: int = 2_000):
        self.h = h
        self.total = total
        self.finite = total is not None
        self.start_ns = start_ns
        self.rate = rate_bps
        self.tick = tick_ns
        self.tokens = 0.0
        self.queued = 0
        self.t_done: int | None = None

    def start(self, ep: Endpoint, now: int) -> None:
        ep.sim.at(self.start_ns, self._begin, ep)

    def _begin(self, ep: Endpoint) -> None:
        if self.rate:
            self._pace(ep)
        else:
            self._fill(ep)

    def _pace(self, ep: Endpoint) -> None:
        self.tokens = min(self.tokens + self.rate / 8 * self.tick / 1e9, self.h.host.sbuf.size)
        self._fill(ep)
        if not self.done:
            ep.sim.at(ep.sim.now + self.tick, self._pace, ep)

    def _fill(self, ep: Endpoint) -> None:
        host = self.h.host
        n = host.sbuf.free
        if self.total is not None:
            n = min(n, self.total - self.queued)
        if self.rate:
            n = min(n, int(self.tokens))
        if n > 0:
            self.queued += n
            self.tokens -= n if self.rate else 0
            ep.send(self.h.conn, n)

    def on_event(self, ep: Endpoint, now: int) -> None:
        if self.done:
            return
        if self.total is not None and self.h.host.una >= self.total:
            self.done = True
            self.t_done = now
            ep.net.app_done(self)
            return
        if now >= self.start_ns:
            self._fill(ep)


class Sink(App):
    """Consumes and verifies everything that becomes ready (optionally rate-limited)."""

    def __init__(self, h: ConnHandle, expect: int | None = None, rate_bps: float | None = None,
                 tick_ns: int = 10_000):
        self.h = h
        self.expect = expect
        self.finite = expect is not None
        self.rate = rate_bps
        self.tick = tick_ns
        self.tokens = 0.0
        self.t_first: int | None = None
        self.t_done: int | None = None
        self.warm: tuple[int, int] | None = None  # (time, bytes) at the end of warmup

    @property
    def received(self) -> int:
        return self.h.host.consumed

    def start(self, ep: Endpoint, now: int) -> None:
        if self.rate:
            ep.sim.at(now + self.tick, self._tick, ep)

    def _tick(self, ep: Endpoint) -> None:
        budget = self.rate / 8 * self.tick / 1e9
        self.tokens = min(self.tokens + budget, 4 * budget + self.h.host.mss)
        self._drain(ep, ep.sim.now)
        if not ep.net.finished:
            ep.sim.at(ep.sim.now + self.tick, self._tick, ep)

    def _drain(self, ep: Endpoint, now: int) -> None:
        host = self.h.host
        if self.rate:
            n = min(int(self.tokens), host.unread)
            if n <= 0:
                return
            self.tokens -= n
            ep.recv(self.h.conn, n)
        elif host.unread:
            ep.recv(self.h.conn)
        else:
            return
        if self.t_first is None:
            self.t_first = now
        if self.finite and not self.done and host.consumed >= self.expect:
            self.done = True
            self.t_done = now
            ep.net.app_done(self)

    def on_event(self, ep: Endpoint, now: int) -> None:
        if not self.rate:
            self._drain(ep, now)


class EchoServer(App):
    def __init__(self, h: ConnHandle, request: int, response: int):
        self.h = h
        self.request = request
        self.response = response
        self.pending = 0
        self.served = 0

    def on_event(self, ep: Endpoint, now: int) -> None:
        host = self.h.host
        if host.unread:
            self.pending += len(ep.recv(self.h.conn))
        while self.pending >= self.request and host.sbuf.free >= self.response:
            self.pending -= self.request
            self.served += 1
            ep.send(self.h.conn, self.response)


class EchoClient(App):
    """Closed-loop RPCs with ``inflight`` outstanding requests."""

    def __init__(self, h: ConnHandle, request: int, response: int, inflight: int = 1,
                 count: int | None = None, start_ns: int = 0, warmup: int = 0):
        self.h = h
        self.request = request
        self.response = response
        self.inflight = inflight
        self.count = count
        self.finite = count is not None
        self.start_ns = start_ns
        self.warmup = warmup
        self.sent: deque[int] = deque()
        self.issued = 0
        self.completed = 0
        self.got = 0
        self.latencies: list[int] = []

    def start(self, ep: Endpoint, now: int) -> None:
        ep.sim.at(self.start_ns, self._issue, ep)

    def _issue(self, ep: Endpoint) -> None:
        host = self.h.host
        while len(self.sent) < self.inflight and (self.count is None or self.issued < self.count) \
                and host.sbuf.free >= self.request:
            self.sent.append(ep.sim.now)
            self.issued += 1
            ep.send(self.h.conn, self.request)

    def on_event(self, ep: Endpoint, now: int) -> None:
        host = self.h.host
        if host.unread:
            self.got += len(ep.recv(self.h.conn))
        while self.got >= self.response and self.sent:
            self.got -= self.response
            t0 = self.sent.popleft()
            self.completed += 1
            if self.completed > self.warmup and not ep.net.measure_closed(now):
                self.latencies.append(now - t0)
        if self.finite and not self.done and self.completed >= self.count:
            self.done = True
            ep.net.app_done(self)
            return
        if now >= self.start_ns:
            self._issue(ep)


class MessageSource(App):
    """Sends messages of given sizes at given times; FCTs come from the host."""

    def __init__(self, h: ConnHandle, schedule: list[tuple[int, int]], tag: str):
        self.h = h
        self.items = sorted(schedule)
        self.tag = tag
        self.finite = bool(self.items)
        self.idx = 0

    def start(self, ep: Endpoint, now: int) -> None:
        for t, size in self.items:
            ep.sim.at(t, self._send, ep, size)

    def _send(self, ep: Endpoint, size: int) -> None:
        if self.h.host.sbuf.free < size:
            ep.stats["message_deferred"] += 1
            ep.sim.at(ep.sim.now + 10_000, self._send, ep, size)
            return
        ep.send(self.h.conn, size, tag=self.tag)
        self.idx += 1

    def on_event(self, ep: Endpoint, now: int) -> None:
        if not self.done and self.idx == len(self.items):
            msgs = [m for m in self.h.host.messages if m.tag == self.tag]
            if msgs and msgs[-1].t_acked is not None:
                self.done = True
                ep.net.app_done(self)


# -- network --------------------------------------------------------------------

@dataclass
class HostParams:
    recovery: str = "gbn"
    rx_buffer: int = 65536
    send_buffer: int = 1 << 20
    rtt_base_ns: int = 20_000
    line_rate_bps: float = 10e9
    host_delay_ns: int = 500
    verify: bool = True
    random_isn: bool = True
    record_retx: bool = False


class Network:
    def __init__(self, seed: int = 0, check_invariants: bool = True):
        self.sim = Simulator()
        self.seed = seed
        self.rng = random.Random(f"net:{seed}")
        self.check_invariants = check_invariants
        self.endpoints: dict[str, Endpoint] = {}
        self.switches: dict[str, Switch] = {}
        self.links: dict[str, Link] = {}
        self.handles: list[ConnHandle] = []
        self.apps: list[App] = []
        self._open_finite = 0
        self.finished = False
        self.t_all_done: int | None = None
        self.measure_end: int | None = None
        self._next_flow = 1

    # -- topology building --
    def add_endpoint(self, name: str, cfg: DatapathConfig, policy: Policy | str = Policy.DCTCP,
                     period_ns: int = 500_000, recovery_ns: int = 100_000,
                     host_delay_ns: int = 500) -> Endpoint:
        ep = Endpoint(self, name, cfg, Policy(policy), period_ns, recovery_ns, host_delay_ns)
        self.endpoints[name] = ep
        return ep

    def add_switch(self, name: str) -> Switch:
        sw = Switch(self.sim, name, len(self.switches) + self.seed * 7919)
        self.switches[name] = sw
        return sw

    def _node_receiver(self, name: str) -> Callable[[Packet], None]:
        if name in self.endpoints:
            return self.endpoints[name].receive
        if name in self.switches:
            return self.switches[name].receive
        raise ConfigError(f"unknown node {name!r}")

    def add_link(self, a: str, b: str, cfg: LinkConfig) -> Link:
        name = f"{a}->{b}"
        if name in self.links:
            raise ConfigError(f"duplicate link {name}")
        link = Link(self.sim, name, cfg, self.seed, self._node_receiver(b))
        self.links[name] = link
        if a in self.endpoints:
            if self.endpoints[a].uplink is not None:
                raise ConfigError(f"endpoint {a} already has an uplink")
            self.endpoints[a].uplink = link
        return link

    # -- connections --
    def connect(self, a: str, b: str, hp: HostParams, credit_cap: int | None = None) -> tuple[ConnHandle, ConnHandle]:
        for n in (a, b):
            if n not in self.endpoints:
                raise ConfigError(f"unknown endpoint {n!r}")
        ea, eb = self.endpoints[a], self.endpoints[b]
        if ea.uplink is None or eb.uplink is None:
            raise ConfigError("connect endpoints after wiring their uplinks")
        f_ab, f_ba = self._next_flow, self._next_flow + 1
        self._next_flow += 2
        if hp.random_isn:
            isn_a, isn_b = self.rng.getrandbits(32), self.rng.getrandbits(32)
        else:
            isn_a = isn_b = 0
        line = hp.line_rate_bps / 8
        now = self.sim.now
        ca = ea.cp.establish(ConnConfig(flow=f_ba, isn_rx=isn_b, isn_tx=isn_a, rx_size=hp.rx_buffer,
                                        peer_rx_size=hp.rx_buffer, credit_cap=credit_cap,
                                        line_rate=line, rtt_base_ns=hp.rtt_base_ns), now)
        cb = eb.cp.establish(ConnConfig(flow=f_ab, isn_rx=isn_a, isn_tx=isn_b, rx_size=hp.rx_buffer,
                                        peer_rx_size=hp.rx_buffer, credit_cap=credit_cap,
                                        line_rate=line, rtt_base_ns=hp.rtt_base_ns), now)
        mss = ea.cfg.mss

        def mk(conn: int, isn_tx: int, isn_rx: int) -> HostConnection:
            return HostConnection(conn, isn_tx, isn_rx, mss, hp.send_buffer, hp.rx_buffer,
                                  hp.rx_buffer, hp.recovery, verify=hp.verify,
                                  record_retx=hp.record_retx)

        ha = ConnHandle(ea, ca, mk(ca, isn_a, isn_b), f_ab, b)
        hb = ConnHandle(eb, cb, mk(cb, isn_b, isn_a), f_ba, a)
        ha.peer, hb.peer = hb, ha
        ea.attach(ha)
        eb.attach(hb)
        self.handles += [ha, hb]
        return ha, hb

    def add_app(self, h: ConnHandle, app: App) -> App:
        h.apps.append(app)
        self.apps.append(app)
        if app.finite:
            self._open_finite += 1
        return app

    def app_done(self, app: App) -> None:
        self._open_finite -= 1
        if self._open_finite == 0 and self.t_all_done is None:
            self.t_all_done = self.sim.now

    def snapshot_sinks(self) -> None:
        for app in self.apps:
            if isinstance(app, Sink):
                app.warm = (self.sim.now, app.received)

    def measure_closed(self, now: int) -> bool:
        return self.measure_end is not None and now > self.measure_end

    # -- execution --
    def run(self, duration_ns: int, drain_ns: int = 2_000_000) -> int:
        """Run until every finite workload completes (plus a drain) or ``duration_ns``."""
        for app in self.apps:
            h = next(x for x in self.handles if app in x.apps)
            app.start(h.ep, self.sim.now)
        has_finite = self._open_finite > 0
        self.measure_end = duration_ns
        self.sim.run(duration_ns, stop=(lambda: self.t_all_done is not None) if has_finite else None)
        end = self.sim.now
        if self.t_all_done is not None:
            self.finished = True
            self.sim.run(self.t_all_done + drain_ns)
        self.finished = True
        return end

    # -- checks at quiescence --
    def check_accounting(self) -> list[str]:
        """Window and credit conservation per connection end."""
        problems = []
        for h in self.handles:
            p = h.ep.program
            c = h.conn
            host = h.host
            size = host.rbuf.size
            isn = p.cp_read("rx_isn", c)
            accepted = seqnum.diff(p.cp_read("good_next_seq", c), isn) if p.cp_read("oow", c) \
                else seqnum.diff(p.cp_read("next_seq", c), isn)
            avail = p.cp_read("avail", c)
            unread = accepted - host.consumed
            inflight = host.consumed - host.replenished
            if avail + unread + inflight != size:
                problems.append(f"{h.ep.name}/{c}: avail {avail} + unread {unread} + in-flight "
                                f"{inflight} != {size}")
            if host.frontier != accepted:
                problems.append(f"{h.ep.name}/{c}: host frontier {host.frontier} != accepted {accepted}")
            st = p.stats[c]
            granted, consumed, revoked = st["credit_granted"], st["credit_consumed"], st["credit_revoked"]
            outstanding = p.cp_read("credits", c)
            if granted - consumed - revoked - outstanding != 0:
                problems.append(f"{h.ep.name}/{c}: credits granted {granted} - consumed {consumed} - "
                                f"revoked {revoked} != outstanding {outstanding}")
            if host.credits != outstanding:
                problems.append(f"{h.ep.name}/{c}: host credit mirror {host.credits} != {outstanding}")
        for link in self.links.values():
            if not link.conserved():
                problems.append(f"link {link.name} does not conserve packets")
        for ep in self.endpoints.values():
            port = ep.port
            if port.injected != port.accepted + port.dropped:
                problems.append(f"{ep.name}: feedback injected != accepted + dropped")
        return problems

    def quiescent(self) -> bool:
        return all(l.in_flight == 0 for l in self.links.values()) and \
            all(ep.port.pending == 0 for ep in self.endpoints.values())


# -- topologies -------------------------------------------------------------------

def _endpoint_kwargs(dp: DatapathConfig, ctl: dict) -> dict:
    return dict(cfg=dp, policy=ctl.get("cc", "dctcp"), period_ns=int(ctl.get("period_us", 500) * 1000),
                recovery_ns=int(ctl.get("recovery_us", 100) * 1000))


def build_pair(net: Network, dp: DatapathConfig, ctl: dict, link: LinkConfig,
               impair_reverse: bool = True) -> list[str]:
    for n in ("h0", "h1"):
        net.add_endpoint(n, **_endpoint_kwargs(dp, ctl))
    rev = link if impair_reverse else LinkConfig(link.rate_bps, link.delay_ns, link.queue_limit, link.ecn_k)
    net.add_link("h0", "h1", link)
    net.add_link("h1", "h0", rev)
    return ["h0", "h1"]


def build_incast(net: Network, dp: DatapathConfig, ctl: dict, senders: int, host_link: LinkConfig,
                 shaper: LinkConfig) -> list[str]:
    """``senders`` hosts share one shaped, ECN-marking bottleneck into ``rx``.

    An incast of degree d is emulated by shaping the bottleneck to 1/d of the
    line rate, so a single sender suffices.
    """
    if senders < 1:
        raise ConfigError("incast needs at least one sender")
    sw = net.add_switch("sw")
    net.add_endpoint("rx", **_endpoint_kwargs(dp, ctl))
    net.add_link("rx", "sw", host_link)
    net.add_link("sw", "rx", shaper)
    sw.add_route("rx", net.links["sw->rx"])
    names = []
    for i in range(senders):
        n = f"tx{i}"
        names.append(n)
        net.add_endpoint(n, **_endpoint_kwargs(dp, ctl))
        net.add_link(n, "sw", host_link)
        net.add_link("sw", n, host_link)
        sw.add_route(n, net.links[f"sw->{n}"])
    return ["rx"] + names


def build_leaf_spine(net: Network, dp: DatapathConfig, ctl: dict, spines: int, leaves: int,
                     hosts_per_leaf: int, host_link: LinkConfig, fabric: LinkConfig) -> list[str]:
    if spines * leaves * hosts_per_leaf == 0:
        raise ConfigError("leaf-spine dimensions must be positive")
    if leaves * hosts_per_leaf > 16:
        raise ConfigError("desk-scale leaf-spine is limited to 16 hosts")
    hosts = []
    for s in range(spines):
        net.add_switch(f"spine{s}")
    for l in range(leaves):
        net.add_switch(f"leaf{l}")
        for s in range(spines):
            net.add_link(f"leaf{l}", f"spine{s}", fabric)
            net.add_link(f"spine{s}", f"leaf{l}", fabric)
    for l in range(leaves):
        for k in range(hosts_per_leaf):
            n = f"h{l * hosts_per_leaf + k}"
            hosts.append(n)
            net.add_endpoint(n, **_endpoint_kwargs(dp, ctl))
            net.add_link(n, f"leaf{l}", host_link)
            net.add_link(f"leaf{l}", n, host_link)
    for l in range(leaves):
        leaf = net.switches[f"leaf{l}"]
        for i, n in enumerate(hosts):
            if i // hosts_per_leaf == l:
                leaf.add_route(n, net.links[f"leaf{l}->{n}"])
            else:
                for s in range(spines):
                    leaf.add_route(n, net.links[f"leaf{l}->spine{s}"])
    for s in range(spines):
        sp = net.switches[f"spine{s}"]
        for i, n in enumerate(hosts):
            sp.add_route(n, net.links[f"spine{s}->leaf{i // hosts_per_leaf}"])
    return hosts


# -- reporting --------------------------------------------------------------------

def percentile(values: list[float], q: float) -> float | None:
    """Nearest-rank percentile (``q`` in [0, 100])."""
    if not values:
        return None
    v = sorted(values)
    k = max(0, min(len(v) - 1, math.ceil(round(q * len(v) / 100, 9)) - 1))  # round off float noise
    return v[k]


def histogram(values: list[int], bucket_ns: int = 5_000, buckets: int = 40) -> dict[str, int]:
    out: dict[str, int] = {}
    for x in values:
        b = min(x // bucket_ns, buckets)
        key = f">={buckets * bucket_ns}" if b == buckets else f"{b * bucket_ns}-{(b + 1) * bucket_ns}"
        out[key] = out.get(key, 0) + 1
    return out


@dataclass
class StatsReport:
    scenario: str
    seed: int
    sim_time_ns: int
    metrics: dict[str, Any] = field(default_factory=dict)
    flows: list[dict[str, Any]] = field(default_factory=list)
    fct: dict[str, dict[str, Any]] = field(default_factory=dict)
    latency: dict[str, Any] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)
    links: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario, "seed": self.seed, "sim_time_ns": self.sim_time_ns,
            "metrics": self.metrics, "flows": self.flows, "fct": self.fct,
            "latency": self.latency, "counters": self.counters, "links": self.links,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        rows = ["section,key,value"]
        for k in sorted(self.metrics):
            rows.append(f"metrics,{k},{_fmt(self.metrics[k])}")
        for cls in sorted(self.fct):
            for k in sorted(self.fct[cls]):
                rows.append(f"fct_{cls},{k},{_fmt(self.fct[cls][k])}")
        for k in sorted(self.latency):
            if k != "histogram":
                rows.append(f"latency,{k},{_fmt(self.latency[k])}")
        for k in sorted(self.counters):
            rows.append(f"counters,{k},{self.counters[k]}")
        return "\n".join(rows) + "\n"


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 9))
    return str(v)


def collect_report(net: Network, name: str, end_ns: int,
                   goodput_window: tuple[int, int] | None = None) -> StatsReport:
    rep = StatsReport(name, net.seed, end_ns)
    totals: Counter = Counter()
    for ep in net.endpoints.values():
        totals.update(ep.stats)
        for c, st in ep.program.stats.items():
            totals.update(st)
        totals["feedback_injected"] += ep.port.injected
        totals["feedback_dropped"] += ep.port.dropped
        for c, cs in ep.cp.conns.items():
            totals["oow_recoveries"] += cs.recoveries
    goodputs = []
    fcts: dict[str, list[float]] = {}
    lat: list[int] = []
    for h in net.handles:
        host = h.host
        totals["host_retx_segments"] += host.stats.retx_segments
        totals["host_retx_bytes"] += host.stats.retx_bytes
        totals["host_fast_retx"] += host.stats.fast_retx
        totals["host_timeouts"] += host.stats.timeouts
        totals["replenish_syncs"] += host.stats.replenish_syncs
        totals["host_probes"] += host.stats.probes
        for app in h.apps:
            if isinstance(app, Sink):
                t0 = app.t_first if app.t_first is not None else 0
                t1 = app.t_done if app.t_done is not None else end_ns
                got = app.received
                if app.warm is not None:
                    t0, got = app.warm[0], got - app.warm[1]
                gp = got * 8e9 / (t1 - t0) if t1 > t0 else 0.0
                goodputs.append(gp)
                rep.flows.append({"src": h.dst, "dst": h.ep.name, "bytes": app.received,
                                  "goodput_bps": gp, "complete": app.done})
            elif isinstance(app, EchoClient):
                lat.extend(app.latencies)
        for m in host.messages:
            if m.tag and m.fct is not None:
                fcts.setdefault(m.tag, []).append(m.fct)
            elif m.tag:
                totals[f"incomplete_{m.tag}"] += 1
    rep.metrics["goodput_bps"] = sum(goodputs)
    rep.metrics["goodput_per_flow_bps"] = (sum(goodputs) / len(goodputs)) if goodputs else 0.0
    rep.metrics["events"] = net.sim.events
    for tag, vals in sorted(fcts.items()):
        rep.fct[tag] = {"count": len(vals), "p50_ns": percentile(vals, 50), "p90_ns": percentile(vals, 90),
                        "p99_ns": percentile(vals, 99), "p999_ns": percentile(vals, 99.9),
                        "mean_ns": sum(vals) / len(vals)}
    if lat:
        rep.latency = {"count": len(lat), "p50_ns": percentile(lat, 50), "p99_ns": percentile(lat, 99),
                       "p999_ns": percentile(lat, 99.9), "histogram": histogram(lat)}
    rep.counters = dict(sorted(totals.items()))
    for name, link in sorted(net.links.items()):
        rep.links[name] = dict(vars(link.stats))
    return rep


__all__ = [
    "App", "ConfigError", "EchoClient", "EchoServer", "Endpoint", "HostParams", "InvariantViolation",
    "Link", "LinkConfig", "MessageSource", "Network", "Packet", "PayloadMismatch", "Simulator",
    "Sink", "StatsReport", "StreamSender", "Switch", "build_incast", "build_leaf_spine", "build_pair",
    "collect_report", "histogram", "percentile",
]
