"""Slow-path control plane: connection setup, congestion-control policy,
SYNC rate programming and out-of-window recovery.

The control plane reads and writes pipeline registers directly and is
driven by the simulator's event loop (``poll`` every control period).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import seqnum
from .params import MTU, DatapathConfig
from .pipeline import LaminarProgram
from .rmt import EventKind, Flag, PHV
from .tx import SyncSchedule

SIG_REGS = ("acked_bytes", "ecn_bytes", "dupacks", "fretx", "rtos")


class ConnExhausted(RuntimeError):
    """No free connection slot in the register arrays."""


class AlreadyBound(RuntimeError):
    """The requested conn_id or flow is already in use."""


class Policy(str, enum.Enum):
    DCTCP = "dctcp"
    TIMELY = "timely"
    AIMD = "aimd"
    NONE = "none"


@dataclass
class CongestionMetrics:
    acked_bytes: int = 0
    ecn_bytes: int = 0
    dupacks: int = 0
    fretx: int = 0
    rtos: int = 0
    rtt_ewma: int = 0  # ns


@dataclass
class DctcpState:
    cwnd: float
    rate: float
    alpha: float = 1.0
    g: float = 1 / 16


def dctcp_update(st: DctcpState, m: CongestionMetrics, rtt_ns: int, period_ns: int,
                 mtu: int = MTU, min_cwnd: float = MTU) -> DctcpState:
    """One control period of DCTCP.

    The marked fraction of the period feeds the alpha EWMA; any mark cuts
    the window by ``alpha/2``, otherwise it grows by one MTU per RTT.
    """
    f = m.ecn_bytes / m.acked_bytes if m.acked_bytes else 0.0
    st.alpha = (1 - st.g) * st.alpha + st.g * f
    st.alpha = min(max(st.alpha, 0.0), 1.0)
    if f > 0:
        st.cwnd *= 1 - st.alpha / 2
    elif m.acked_bytes:
        st.cwnd += mtu * period_ns / rtt_ns
    st.cwnd = max(st.cwnd, min_cwnd)
    st.rate = st.cwnd * 1e9 / rtt_ns
    return st


@dataclass
class TimelyState:
    rate: float
    min_rate: float
    max_rate: float
    prev_rtt: float = 0.0
    rtt_diff: float = 0.0
    hai: int = 0
    alpha: float = 0.875  # weight of the old gradient in the EWMA
    beta: float = 0.8
    delta: float = 10e6 / 8  # additive step, bytes/s
    t_low: float = 50_000.0
    t_high: float = 500_000.0
    min_rtt: float = 20_000.0


def timely_update(st: TimelyState, new_rtt: float) -> TimelyState:
    """RTT-gradient rate update with hyperactive increase after five rounds."""
    if new_rtt <= 0:
        return st
    if st.prev_rtt == 0:
        st.prev_rtt = new_rtt
        return st
    diff = new_rtt - st.prev_rtt
    st.prev_rtt = new_rtt
    st.rtt_diff = st.alpha * st.rtt_diff + (1 - st.alpha) * diff
    grad = st.rtt_diff / st.min_rtt
    if new_rtt < st.t_low:
        st.rate += st.delta
        st.hai = 0
    elif new_rtt > st.t_high:
        st.rate *= 1 - st.beta * (1 - st.t_high / new_rtt)
        st.hai = 0
    elif grad <= 0:
        st.hai += 1
        st.rate += st.delta * (5 if st.hai >= 5 else 1)
    else:
        st.rate *= 1 - st.beta * min(grad, 1.0)
        st.hai = 0
    st.rate = min(max(st.rate, st.min_rate), st.max_rate)
    return st


@dataclass
class AimdState:
    cwnd: float
    rate: float


def aimd_update(st: AimdState, m: CongestionMetrics, rtt_ns: int, period_ns: int,
                mtu: int = MTU) -> AimdState:
    """Loss-driven AIMD (NewReno-like): halve on any loss signal in the period."""
    if m.fretx or m.rtos:
        st.cwnd = max(st.cwnd / 2, mtu)
    elif m.acked_bytes:
        st.cwnd += mtu * period_ns / rtt_ns
    st.rate = st.cwnd * 1e9 / rtt_ns
    return st


@dataclass
class ConnConfig:
    conn_id: int | None = None
    flow: int = -1
    isn_rx: int = 0
    isn_tx: int = 0
    rx_size: int = 65536
    peer_rx_size: int = 65536
    credit_cap: int | None = None  # default: the peer's window
    line_rate: float = 10e9 / 8  # bytes/s
    rtt_base_ns: int = 20_000


@dataclass
class ConnState:
    cfg: ConnConfig
    cc: DctcpState | TimelyState | AimdState | None
    last_sig: dict[str, int] = field(default_factory=dict)
    last_ack_count: int = 0
    last_ns: int = 0
    recovering: bool = False
    recoveries: int = 0


class ControlPlane:
    """Per-pipeline control plane instance."""

    def __init__(self, program: LaminarProgram, schedule: SyncSchedule | None = None,
                 policy: Policy | str = Policy.DCTCP, period_ns: int = 500_000,
                 recovery_ns: int = 100_000, g: float = 1 / 16):
        self.program = program
        self.cfg: DatapathConfig = program.cfg
        self.schedule = schedule or SyncSchedule(mss=self.cfg.mss)
        self.policy = Policy(policy)
        self.period_ns = period_ns
        self.recovery_ns = recovery_ns
        self.g = g
        self.conns: dict[int, ConnState] = {}

    # -- lifecycle --
    def establish(self, cc: ConnConfig, now: int = 0) -> int:
        p = self.program
        if cc.conn_id is None:
            free = [i for i in range(p.width) if i not in self.conns]
            if not free:
                raise ConnExhausted(f"all {p.width} connection slots in use")
            conn = free[0]
        else:
            conn = cc.conn_id
            if not 0 <= conn < p.width:
                raise ConnExhausted(f"conn_id {conn} outside table width {p.width}")
            if conn in self.conns:
                raise AlreadyBound(f"conn_id {conn} already established")
        if cc.flow >= 0 and cc.flow in p.demux:
            raise AlreadyBound(f"flow {cc.flow} already bound")
        cap = cc.credit_cap if cc.credit_cap is not None else cc.peer_rx_size
        for reg in p.registers.values():
            reg.cells[conn] = 0
        if p.ooo_table is not None:
            p.ooo_table.pop(conn, None)
        right = seqnum.add(cc.isn_rx, cc.rx_size)
        init = {
            "conn_active": 1, "next_seq": cc.isn_rx, "avail": cc.rx_size, "rx_cap": cc.rx_size,
            "rx_isn": cc.isn_rx, "rx_size": cc.rx_size, "good_next_seq": cc.isn_rx,
            "good_right": right, "adv_right": right,
            "snd_una": cc.isn_tx, "snd_nxt": cc.isn_tx, "notified_una": cc.isn_tx,
            "peer_right": seqnum.add(cc.isn_tx, cc.peer_rx_size),
            "recover": seqnum.add(cc.isn_tx, -1), "credit_cap": cap,
        }
        for name, v in init.items():
            p.cp_write(name, conn, v)
        if cc.flow >= 0:
            p.demux[cc.flow] = conn
        st = ConnState(cc, self._initial_cc(cc), {n: 0 for n in SIG_REGS})
        self.conns[conn] = st
        rate = self._rate(st)
        entry = self.schedule.program(conn, rate, cc.rtt_base_ns, now)
        if self.policy is Policy.NONE:
            entry.credits_per_sync = cap
        return conn

    def teardown(self, conn: int) -> None:
        st = self.conns.pop(conn, None)
        if st is None:
            return
        self.program.cp_write("conn_active", conn, 0)
        if st.cfg.flow >= 0:
            self.program.demux.pop(st.cfg.flow, None)
        self.schedule.remove(conn)

    def _initial_cc(self, cc: ConnConfig):
        bdp = max(cc.line_rate * cc.rtt_base_ns / 1e9, MTU)
        if self.policy is Policy.DCTCP:
            return DctcpState(bdp, cc.line_rate, 1.0, self.g)
        if self.policy is Policy.AIMD:
            return AimdState(bdp, cc.line_rate)
        if self.policy is Policy.TIMELY:
            base = cc.rtt_base_ns
            return TimelyState(cc.line_rate, cc.line_rate / 1000, cc.line_rate,
                               delta=cc.line_rate / 100, t_low=2 * base, t_high=10 * base,
                               min_rtt=base)
        return None

    @staticmethod
    def _rate(st: ConnState) -> float:
        return st.cc.rate if st.cc is not None else st.cfg.line_rate

    # -- metrics / policy --
    def harvest(self, conn: int) -> CongestionMetrics:
        """Counter deltas since the previous harvest (32-bit wrap aware)."""
        st = self.conns[conn]
        m = CongestionMetrics()
        for name in SIG_REGS:
            cur = self.program.cp_read(name, conn)
            setattr(m, name, (cur - st.last_sig[name]) & seqnum.MASK)
            st.last_sig[name] = cur
        m.rtt_ewma = self.program.cp_read("rtt_ewma", conn)
        return m

    def poll(self, now: int) -> list[PHV]:
        """One control period: update rates and flush stale delayed ACKs.

        Returns PSEUDO_ACK PHVs to inject into the pipeline.
        """
        out: list[PHV] = []
        p = self.program
        for conn, st in self.conns.items():
            m = self.harvest(conn)
            cc = st.cc
            # window-to-rate conversion uses the measured RTT, so queueing delay
            # slows both the rate and the additive increase
            rtt = max(st.cfg.rtt_base_ns, m.rtt_ewma)
            if isinstance(cc, DctcpState):
                dctcp_update(cc, m, rtt, self.period_ns)
            elif isinstance(cc, AimdState):
                aimd_update(cc, m, rtt, self.period_ns)
            elif isinstance(cc, TimelyState):
                timely_update(cc, m.rtt_ewma)
            if cc is not None:
                cc.rate = min(max(cc.rate, MTU * 1e9 / (64 * st.cfg.rtt_base_ns)), st.cfg.line_rate)
                self.schedule.program(conn, cc.rate)
            # a delayed ACK that has been pending for a whole period is flushed
            cnt = p.cp_read("ack_count", conn)
            ns = p.cp_read("next_seq", conn)
            if cnt and cnt == st.last_ack_count and ns == st.last_ns:
                out.append(PHV(EventKind.PSEUDO_ACK, conn, flags=Flag.PSEUDO))
            st.last_ack_count, st.last_ns = cnt, ns
        return out

    def rate(self, conn: int) -> float:
        return self._rate(self.conns[conn])

    # -- out-of-window recovery --
    def on_exception(self, kind: str, conn: int) -> int | None:
        """Returns the delay after which :meth:`recover_oow` should run."""
        st = self.conns.get(conn)
        if kind != "oow" or st is None or st.recovering:
            return None
        st.recovering = True
        return self.recovery_ns

    def recover_oow(self, conn: int) -> list[PHV]:
        """Restore ``next_seq``/``avail`` from the last-known-good checkpoint."""
        ns, avail = restore_window(self.program, conn)
        st = self.conns.get(conn)
        if st is not None:
            st.recovering = False
            st.recoveries += 1
        return [PHV(EventKind.PSEUDO_ACK, conn, flags=Flag.PSEUDO)]


def restore_window(program: LaminarProgram, conn: int) -> tuple[int, int]:
    """Idempotent restore of the receive window from the ACK-stage shadow."""
    good_ns = program.cp_read("good_next_seq", conn)
    avail = seqnum.diff(program.cp_read("good_right", conn), good_ns)
    program.cp_write("next_seq", conn, good_ns)
    program.cp_write("avail", conn, avail)
    program.cp_write("oow", conn, 0)
    return good_ns, avail
