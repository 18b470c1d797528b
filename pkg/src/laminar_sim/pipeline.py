"""Assembly of the full Laminar program: read-only ingress, the receive and
transmit blocks on egress, and a final emit stage that builds wire packets.
"""
from __future__ import annotations

from . import seqnum
from .params import DatapathConfig
from .rmt import EventKind, Flag, Gress, Mode, PHV, PipelineProgram, Stage, StageContext, StageRegister
from .rx import build_rx
from .tx import build_tx


class LaminarProgram(PipelineProgram):
    """Pipeline program plus the match tables and config it was built from."""

    def __init__(self, cfg: DatapathConfig, stages, registers, demux: dict[int, int], ooo_table):
        name = "laminar-ooo-max" if cfg.fidelity is None else f"laminar-ooo-{cfg.fidelity}"
        super().__init__(name, stages, registers, cfg.width, cfg.stage_delay,
                         bounded=cfg.fidelity is not None)
        self.cfg = cfg
        self.demux = demux  # wire flow id -> conn_id (exact-match table)
        self.ooo_table = ooo_table

    @property
    def reentry_latency(self) -> int:
        """Extra pass latency of a mirrored pseudo-segment."""
        n = self.egress_len if self.cfg.mirror_to == "egress" else len(self.stages)
        return n * self.stage_delay

    def ooo_intervals(self, conn: int) -> list[tuple[int, int]]:
        """Tracked islands of ``conn`` as absolute ``[start, end)`` ranges."""
        if self.ooo_table is not None:
            return [tuple(iv) for iv in self.ooo_table.get(conn, [])]
        ns = self.cp_read("next_seq", conn)
        out = []
        for i in range(1, (self.cfg.fidelity or 0) + 1):
            t = self.cp_read(f"ooo_tail_{i}", conn)
            if not t:
                break
            out.append((seqnum.add(ns, self.cp_read(f"ooo_head_{i}", conn)), seqnum.add(ns, t)))
        return out


def _ingress(cfg: DatapathConfig, demux: dict[int, int], w: int) -> tuple[list[Stage], list[StageRegister]]:
    r_act = StageRegister("conn_active", "ing.sched", w)

    def h_demux(ctx: StageContext, phv: PHV) -> None:
        if phv.flow >= 0 and phv.kind is EventKind.RX:
            conn = demux.get(phv.flow)
            if conn is None:
                ctx.count("unknown_flow")
                ctx.drop()
                return
            phv.conn_id = conn

    def h_sched(ctx: StageContext, phv: PHV) -> None:
        if not ctx.read(r_act):
            ctx.count("inactive_conn")
            ctx.drop()

    mss = cfg.mss

    def h_parse(ctx: StageContext, phv: PHV) -> None:
        if (phv.kind is EventKind.RX or phv.kind is EventKind.TX) and phv.len > mss:
            ctx.count("oversize")
            ctx.drop()

    stages = [
        Stage("ing.demux", Gress.INGRESS, {}, h_demux),
        Stage("ing.sched", Gress.INGRESS, {"conn_active": Mode.READ}, h_sched),
        Stage("ing.parse", Gress.INGRESS, {}, h_parse),
    ]
    return stages, [r_act]


def _h_emit(ctx: StageContext, phv: PHV) -> None:
    ts = (ctx.now & seqnum.MASK) or 1
    if phv.kind is EventKind.TX and phv.len > 0:
        out = phv.wire_copy()
        out.flags = Flag.ACK
        out.tsval = ts
        ctx.emit(out)
        ctx.count("tx_segments")
    if ctx.get(phv, "wa", 0):
        ctx.emit(PHV(EventKind.TX, ctx.conn, ctx.get(phv, "nxt"), 0,
                     Flag.ACK | (phv.flags & Flag.ECE), phv.ack_seq, phv.window, phv.sack,
                     tsval=ts, tsecr=phv.tsecr))
        ctx.count("acks_sent")


def build_laminar_program(cfg: DatapathConfig | None = None) -> LaminarProgram:
    cfg = cfg or DatapathConfig()
    demux: dict[int, int] = {}
    ing, ing_regs = _ingress(cfg, demux, cfg.width)
    rx = build_rx(cfg)
    tx_stages, tx_regs = build_tx(cfg)
    stages = ing + rx.stages + tx_stages + [Stage("emit", Gress.EGRESS, {}, _h_emit)]
    return LaminarProgram(cfg, stages, ing_regs + rx.registers + tx_regs, demux, rx.ooo_table)
