"""Receive-side data path: receive window, OOO tracking, ACK generation,
data placement and application notification.

Each block is a pure step function over plain integers plus a stage handler
that runs it over stage registers.  Out-of-order intervals are stored as
offsets relative to ``next_seq``; slot ``i`` is active iff its tail is
non-zero.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import seqnum
from .params import DatapathConfig
from .rmt import (
    EventKind, Flag, Gress, Mode, PHV, Stage, StageContext, StageRegister,
)

class ReplenishOverflow(ValueError):
    """Replenishing would advertise more window than the buffer can hold."""


class SegClass(enum.IntEnum):
    NONE = 0
    INORDER = 1
    OOO = 2
    DUP = 3


class SlotMode(enum.IntEnum):
    IDLE = 0
    SHIFT = 1  # in-order bytes accepted: slide offsets down
    CASCADE = 2  # shift by an effective length beyond any window: snapshot and clear
    SEEK = 3  # OOO segment looking for a slot
    DONE = 4  # OOO segment merged into or initialized a slot
    EXTEND = 5  # merged and grew a tail: downstream slots are re-injected
    DROP = 6  # OOO segment fits nowhere


@dataclass(frozen=True)
class Advance:
    cls: SegClass
    next_seq: int  # after the optimistic advance
    trim: int = 0  # duplicate prefix removed
    accepted: int = 0  # in-order bytes
    so: int = 0  # OOO start offset from next_seq
    eo: int = 0  # OOO end offset from next_seq


def rx_stage_advance(next_seq: int, seq: int, length: int) -> Advance:
    """Trim duplicates and optimistically advance ``next_seq``."""
    if length <= 0:
        return Advance(SegClass.NONE, next_seq)
    end = seqnum.add(seq, length)
    if seqnum.diff(end, next_seq) <= 0:
        return Advance(SegClass.DUP, next_seq)
    d = seqnum.diff(seq, next_seq)
    if d <= 0:
        return Advance(SegClass.INORDER, end, trim=-d, accepted=length + d)
    return Advance(SegClass.OOO, next_seq, so=d, eo=d + length)


def rx_stage_validate(avail: int, adv: Advance, recovering: bool = False) -> tuple[bool, int, bool]:
    """Definitive out-of-window check.

    Returns ``(in_window, new_avail, raise_exception)``.  In-order bytes are
    decremented speculatively; the exception fires on the first violation
    only, and everything fails while a recovery is pending.
    """
    if adv.cls is SegClass.INORDER:
        if recovering or avail < 0:
            return False, avail, False
        new = avail - adv.accepted
        ok = new >= 0
        return ok, new, not ok
    if adv.cls is SegClass.OOO:
        return (not recovering and avail >= 0 and adv.eo <= avail), avail, False
    return True, avail, False


def replenish(avail: int, nbytes: int, limit: int = seqnum.HALF - 1) -> int:
    """Return ``avail + nbytes``; ``limit`` bounds the advertised window."""
    if nbytes < 0:
        raise ReplenishOverflow(f"negative replenish {nbytes}")
    new = avail + nbytes
    if new > limit:
        raise ReplenishOverflow(f"avail {avail} + {nbytes} exceeds {limit}")
    return new


# -- OOO interval slots --------------------------------------------------------
# Slot i occupies two consecutive stages, tail first, then head.

def tail_step(mode: SlotMode, tail: int, length: int, so: int, eo: int) -> int:
    if mode is SlotMode.SHIFT:
        return max(tail - length, 0)
    if mode is SlotMode.CASCADE or mode is SlotMode.EXTEND:
        return 0
    if mode is SlotMode.SEEK:
        if tail == 0:
            return eo
        if so <= tail:
            # if the segment lies wholly before the head, eo < head < tail
            return max(tail, eo)
    return tail


def head_step(mode: SlotMode, head: int, tail_old: int, length: int, so: int, eo: int
              ) -> tuple[int, SlotMode, int, bool]:
    """Returns ``(new_head, next_mode, merge_len, snapshot)``.

    ``merge_len`` is set when an in-order segment closed the gap to this slot
    and bytes remain to be committed by a merge pseudo-segment.  ``snapshot``
    means the slot was cleared by a cascade and must be replayed.
    """
    if mode is SlotMode.SHIFT:
        if tail_old == 0:
            return 0, SlotMode.IDLE, 0, False
        if head - length > 0:
            return head - length, mode, 0, False
        # gap closed (or the island was overrun): downstream slots cascade
        return 0, SlotMode.CASCADE, max(tail_old - length, 0), False
    if mode is SlotMode.CASCADE or mode is SlotMode.EXTEND:
        return 0, mode, 0, tail_old > 0
    if mode is SlotMode.SEEK:
        if tail_old == 0:
            return so, SlotMode.DONE, 0, False
        if so <= tail_old:
            if eo < head:
                return head, SlotMode.DROP, 0, False
            nxt = SlotMode.EXTEND if eo > tail_old else SlotMode.DONE
            return min(head, so), nxt, 0, False
    return head, mode, 0, False


def initial_mode(adv: Advance, in_window: bool) -> SlotMode:
    if not in_window:
        return SlotMode.IDLE
    if adv.cls is SegClass.INORDER:
        return SlotMode.SHIFT
    if adv.cls is SegClass.OOO:
        return SlotMode.SEEK
    return SlotMode.IDLE


@dataclass
class OooResult:
    heads: list[int]
    tails: list[int]
    mode: SlotMode
    merge_len: int = 0
    snapshots: list[tuple[int, int]] = field(default_factory=list)  # relative to pre-advance next_seq

    @property
    def placed(self) -> bool:
        return self.mode in (SlotMode.DONE, SlotMode.EXTEND)

    @property
    def gap_closed(self) -> bool:
        return self.merge_len > 0 or self.mode is SlotMode.CASCADE


def ooo_track(heads: list[int], tails: list[int], adv: Advance, in_window: bool = True) -> OooResult:
    """Run the slot stages in order for one traversal (pure model)."""
    heads, tails = list(heads), list(tails)
    mode = initial_mode(adv, in_window)
    length, so, eo = adv.accepted, adv.so, adv.eo
    res = OooResult(heads, tails, mode)
    for i in range(len(tails)):
        t_old, h_old = tails[i], heads[i]
        tails[i] = tail_step(mode, t_old, length, so, eo)
        heads[i], mode, m, snap = head_step(mode, h_old, t_old, length, so, eo)
        if m:
            res.merge_len = m
        if snap:
            res.snapshots.append((h_old, t_old))
        if mode is SlotMode.IDLE:
            break
    if mode is SlotMode.SEEK:
        mode = SlotMode.DROP
    res.mode = mode
    return res


def emit_merge_pseudo(next_seq: int, merge_len: int, conn_id: int = 0, tsval: int = 0) -> PHV | None:
    """Merge pseudo-segment covering ``[next_seq, next_seq + merge_len)``.

    It doubles as the ACK for the triggering traversal (``Flag.ACK``).
    """
    if merge_len <= 0:
        return None
    return PHV(EventKind.PSEUDO_MERGE, conn_id, next_seq, merge_len, Flag.ACK | Flag.PSEUDO, tsval=tsval)


def replay_pseudo(start: int, end: int, conn_id: int = 0) -> PHV:
    """Replay of a cascaded interval snapshot (absolute range)."""
    return PHV(EventKind.PSEUDO_MERGE, conn_id, start & seqnum.MASK,
               seqnum.diff(end, start), Flag.PSEUDO)


@dataclass(frozen=True)
class Placement:
    offset: int
    len: int


def place_data(isn: int, size: int, seq: int, length: int) -> Placement:
    """DMA descriptor into a double-mapped ring of ``size`` bytes."""
    return Placement(seqnum.diff(seq, isn) % size, length)


def ack_needed(cls: SegClass, in_window: bool, count: int, m: int, ce: bool = False,
               ooo_active: bool = False) -> tuple[bool, int]:
    """Delayed-ACK decision for one data arrival: ``(ack_now, new_count)``."""
    if not in_window or cls is SegClass.DUP or cls is SegClass.OOO or ce:
        return True, 0
    if cls is SegClass.INORDER:
        count += 1
        if count >= m or ooo_active:
            return True, 0
    return False, count


def notify_ready(next_seq: int, merge_len: int, isn: int, size: int) -> int:
    """Ready offset for the application; a closed gap reports through the island."""
    return seqnum.diff(seqnum.add(next_seq, merge_len), isn) % size


# -- stage handlers --------------------------------------------------------------

RX_KEYS = ("cls", "ns", "acc", "so", "eo", "ok", "av", "rec", "md", "mg", "to", "ia", "ih", "it")


@dataclass
class RxBlocks:
    cfg: DatapathConfig
    stages: list[Stage]
    registers: list[StageRegister]
    ooo_table: dict[int, list[list[int]]] | None = None  # OOO-max side state


def build_rx(cfg: DatapathConfig) -> RxBlocks:
    w = cfg.width
    n_slots = cfg.fidelity
    regs: list[StageRegister] = []
    stages: list[Stage] = []

    def reg(name: str, stage: str, signed: bool = False) -> StageRegister:
        r = StageRegister(name, stage, w, signed)
        regs.append(r)
        return r

    # -- next_seq --
    r_ns = reg("next_seq", "rx.next_seq")

    def h_next_seq(ctx: StageContext, phv: PHV) -> None:
        kind = phv.kind
        if kind is EventKind.RX or kind is EventKind.PSEUDO_MERGE:
            ns = ctx.read(r_ns)
            adv = rx_stage_advance(ns, phv.seq, phv.len)
            if adv.cls is SegClass.INORDER:
                ctx.write(r_ns, adv.next_seq)
                if adv.trim:
                    phv.seq = ns
                    phv.len = adv.accepted
                    if phv.payload:
                        phv.payload = phv.payload[adv.trim:]
                ctx.put(phv, "acc", adv.accepted)
            elif adv.cls is SegClass.OOO:
                ctx.put(phv, "so", adv.so)
                ctx.put(phv, "eo", adv.eo)
            ctx.put(phv, "cls", adv.cls)
            ctx.put(phv, "ns", adv.next_seq)
        else:
            ctx.put(phv, "cls", SegClass.NONE)
            ctx.put(phv, "ns", ctx.read(r_ns))

    stages.append(Stage("rx.next_seq", Gress.EGRESS, {"next_seq": Mode.RMW}, h_next_seq))

    # -- avail + recovery flag --
    r_av = reg("avail", "rx.avail", signed=True)
    r_oow = reg("oow", "rx.avail")
    r_cap = reg("rx_cap", "rx.avail")

    def h_avail(ctx: StageContext, phv: PHV) -> None:
        av = ctx.read(r_av)
        rec = ctx.read(r_oow)
        cls = ctx.get(phv, "cls")
        ok = True
        if phv.kind is EventKind.SYNC and not phv.flags & Flag.GEN and phv.credit > 0:
            try:
                av = replenish(av, phv.credit, 2 * ctx.read(r_cap))
                ctx.write(r_av, av)
            except ReplenishOverflow as exc:
                ctx.raise_exception("replenish_overflow", detail=str(exc))
                ctx.count("replenish_overflow")
                phv.credit = 0
        elif cls == SegClass.INORDER or cls == SegClass.OOO:
            if cls == SegClass.INORDER:
                adv = Advance(SegClass.INORDER, 0, accepted=ctx.get(phv, "acc"))
            else:
                adv = Advance(SegClass.OOO, 0, so=ctx.get(phv, "so"), eo=ctx.get(phv, "eo"))
            ok, new, exc = rx_stage_validate(av, adv, bool(rec))
            if new != av:
                ctx.write(r_av, new)
                av = new
            if exc:
                ctx.write(r_oow, 1)
                rec = 1
                ctx.raise_exception("oow", seq=phv.seq, len=phv.len, avail=av)
                ctx.count("zero_window_events")
            if not ok:
                ctx.count("rx_oow_dropped")
            ctx.put(phv, "md", initial_mode(adv, ok))
        ctx.put(phv, "ok", int(ok))
        ctx.put(phv, "av", av)
        ctx.put(phv, "rec", rec)

    stages.append(Stage("rx.avail", Gress.EGRESS,
                        {"avail": Mode.RMW, "oow": Mode.RMW, "rx_cap": Mode.READ}, h_avail))

    ooo_table = None
    if n_slots is None:
        ooo_table = {}
        stages.append(Stage("rx.ooo_max", Gress.EGRESS, {}, _ooo_max_handler(ooo_table, cfg)))
    else:
        for i in range(1, n_slots + 1):
            rt = reg(f"ooo_tail_{i}", f"rx.ooo_tail_{i}")
            rh = reg(f"ooo_head_{i}", f"rx.ooo_head_{i}")
            stages.append(Stage(f"rx.ooo_tail_{i}", Gress.EGRESS, {rt.name: Mode.RMW},
                                _tail_handler(rt, i)))
            stages.append(Stage(f"rx.ooo_head_{i}", Gress.EGRESS, {rh.name: Mode.RMW},
                                _head_handler(rh, i, cfg)))

    # -- ACK generation --
    r_cnt = reg("ack_count", "rx.ack")
    r_gns = reg("good_next_seq", "rx.ack")
    r_grt = reg("good_right", "rx.ack")
    r_adv = reg("adv_right", "rx.ack")
    m = cfg.delayed_ack
    sack = cfg.sack
    wu = cfg.window_update

    def fill_ack(ctx: StageContext, phv: PHV, ns: int, av: int, rec: int) -> None:
        if rec:
            ack, win = ctx.read(r_gns), 0
        else:
            ack, win = ns, max(av, 0)
        phv.ack_seq = ack
        phv.window = win
        phv.sack = None
        if sack and not rec:
            ih = ctx.get(phv, "ih")
            if ih is not None:
                phv.sack = (ih, ctx.get(phv, "it"))
        ctx.write(r_cnt, 0)
        right = seqnum.add(ack, win)
        if seqnum.gt(right, ctx.read(r_adv)) or rec:
            ctx.write(r_adv, right)

    def h_ack(ctx: StageContext, phv: PHV) -> None:
        kind = phv.kind
        ns = ctx.get(phv, "ns")
        av = ctx.get(phv, "av")
        rec = ctx.get(phv, "rec")
        if not rec:
            ctx.write(r_gns, ns)
            ctx.write(r_grt, seqnum.add(ns, av))
        elif kind is EventKind.SYNC and not phv.flags & Flag.GEN and phv.credit > 0:
            ctx.write(r_grt, seqnum.add(ctx.read(r_grt), phv.credit))

        if kind is EventKind.TX or kind is EventKind.PSEUDO_ACK:
            fill_ack(ctx, phv, ns, av, rec)
            if kind is EventKind.PSEUDO_ACK:
                ctx.put(phv, "wa", 1)
            return
        if kind is EventKind.SYNC:
            if not phv.flags & Flag.GEN and phv.credit > 0 and not rec:
                # window update when the advertised window has run low
                if seqnum.diff(ctx.read(r_adv), ns) < wu:
                    ctx.mirror(PHV(EventKind.PSEUDO_ACK, ctx.conn, flags=Flag.PSEUDO), cfg.mirror_delay)
                    ctx.count("window_updates")
            return
        cls = ctx.get(phv, "cls")
        if cls == SegClass.NONE:
            return
        ok = ctx.get(phv, "ok")
        mg = ctx.get(phv, "mg", 0)
        if kind is EventKind.PSEUDO_MERGE:
            if phv.flags & Flag.ACK:
                if not mg:
                    # coalesced merge + ACK leaves the pipeline as a wire ACK
                    phv.tsecr = phv.tsval
                    fill_ack(ctx, phv, ns, av, rec)
                    ctx.put(phv, "wa", 1)
            elif cls == SegClass.INORDER and ok and not mg:
                ctx.mirror(PHV(EventKind.PSEUDO_ACK, ctx.conn, flags=Flag.PSEUDO), cfg.mirror_delay)
            return
        if mg:
            ctx.write(r_cnt, 0)
            return
        ce = bool(phv.flags & Flag.CE)
        now_ack, cnt = ack_needed(SegClass(cls), bool(ok), ctx.read(r_cnt), m, ce,
                                  bool(ctx.get(phv, "ia", 0)))
        if now_ack:
            flags = Flag.PSEUDO | (Flag.ECE if ce else Flag.NONE)
            ctx.mirror(PHV(EventKind.PSEUDO_ACK, ctx.conn, flags=flags, tsecr=phv.tsval),
                       cfg.mirror_delay)
        ctx.write(r_cnt, cnt)

    stages.append(Stage("rx.ack", Gress.EGRESS, {
        "ack_count": Mode.RMW, "good_next_seq": Mode.RMW, "good_right": Mode.RMW,
        "adv_right": Mode.RMW}, h_ack))

    # -- data placement + application notification --
    r_isn = reg("rx_isn", "rx.place")
    r_size = reg("rx_size", "rx.place")

    def h_place(ctx: StageContext, phv: PHV) -> None:
        cls = ctx.get(phv, "cls")
        if cls == SegClass.INORDER or cls == SegClass.OOO:
            ok = ctx.get(phv, "ok")
            isn, size = ctx.read(r_isn), ctx.read(r_size)
            fields: dict = {}
            if ok and phv.kind is EventKind.RX:
                placed = cls == SegClass.INORDER or ctx.get(phv, "md") in (SlotMode.DONE, SlotMode.EXTEND)
                if placed:
                    p = place_data(isn, size, phv.seq, phv.len)
                    fields["dma"] = (p.offset, p.len)
                    fields["seq"] = phv.seq
                    fields["data"] = phv.payload
                    ctx.count("rx_ooo_placed" if cls == SegClass.OOO else "rx_inorder")
                else:
                    ctx.count("rx_ooo_dropped")
            if ok and cls == SegClass.INORDER:
                ns = ctx.get(phv, "ns")
                mg = ctx.get(phv, "mg", 0)
                ready = seqnum.add(ns, mg)
                fields["ready"] = ready
                fields["ready_offset"] = notify_ready(ns, mg, isn, size)
            if fields:
                ctx.notify("rx", **fields)
        phv.scratch.free(*RX_KEYS)

    stages.append(Stage("rx.place", Gress.EGRESS, {"rx_isn": Mode.READ, "rx_size": Mode.READ}, h_place))
    return RxBlocks(cfg, stages, regs, ooo_table)


def _tail_handler(rt: StageRegister, index: int):
    first = index == 1

    def h(ctx: StageContext, phv: PHV) -> None:
        mode = ctx.get(phv, "md", SlotMode.IDLE)
        if mode == SlotMode.IDLE or mode == SlotMode.DONE or mode == SlotMode.DROP:
            if first:
                ctx.put(phv, "to", ctx.read(rt))  # island state for ACK generation
            return
        t = ctx.read(rt)
        ctx.put(phv, "to", t)
        if mode == SlotMode.SHIFT:
            new = tail_step(SlotMode.SHIFT, t, ctx.get(phv, "acc"), 0, 0)
        elif mode == SlotMode.SEEK:
            new = tail_step(SlotMode.SEEK, t, 0, ctx.get(phv, "so"), ctx.get(phv, "eo"))
        else:
            new = 0
        if new != t:
            ctx.write(rt, new)
    return h


def _head_handler(rh: StageRegister, index: int, cfg: DatapathConfig):
    first = index == 1

    def h(ctx: StageContext, phv: PHV) -> None:
        mode = SlotMode(ctx.get(phv, "md", SlotMode.IDLE))
        ns = ctx.get(phv, "ns")
        if mode in (SlotMode.IDLE, SlotMode.DONE, SlotMode.DROP):
            if first:
                t = ctx.get(phv, "to")
                if t:
                    _island(ctx, phv, cfg, ns, ctx.read(rh), t)
            return
        t_old = ctx.get(phv, "to")
        head = ctx.read(rh)
        length = ctx.get(phv, "acc", 0)
        so, eo = ctx.get(phv, "so", 0), ctx.get(phv, "eo", 0)
        new_head, nxt, merge, snap = head_step(mode, head, t_old, length, so, eo)
        if new_head != head:
            ctx.write(rh, new_head)
        if snap:
            base = seqnum.add(ns, -length) if length else ns
            ctx.mirror(replay_pseudo(seqnum.add(base, head), seqnum.add(base, t_old), ctx.conn),
                       cfg.mirror_delay)
            ctx.count("pseudo_replays")
        if merge:
            ctx.put(phv, "mg", merge)
            ctx.mirror(emit_merge_pseudo(ns, merge, ctx.conn, phv.tsval), cfg.mirror_delay)
            ctx.count("pseudo_merges")
        if first:
            tail = tail_step(mode, t_old, length, so, eo)
            if tail:
                _island(ctx, phv, cfg, ns, new_head, tail)
        if nxt == SlotMode.SEEK and index == cfg.fidelity:
            nxt = SlotMode.DROP
        ctx.put(phv, "md", nxt)
    return h


def _island(ctx: StageContext, phv: PHV, cfg: DatapathConfig, ns: int, head: int, tail: int) -> None:
    ctx.put(phv, "ia", 1)
    if cfg.sack:
        ctx.put(phv, "ih", seqnum.add(ns, head))
        ctx.put(phv, "it", seqnum.add(ns, tail))


def _ooo_max_handler(table: dict[int, list[list[int]]], cfg: DatapathConfig):
    """Unbounded interval list (absolute sequence numbers), the reference tracker."""

    def h(ctx: StageContext, phv: PHV) -> None:
        mode = ctx.get(phv, "md", SlotMode.IDLE)
        ivs = table.setdefault(ctx.conn, [])
        ns = ctx.get(phv, "ns")
        if mode == SlotMode.SHIFT:
            while ivs and seqnum.le(ivs[0][1], ns):
                ivs.pop(0)
            if ivs and seqnum.le(ivs[0][0], ns):
                merge = seqnum.diff(ivs[0][1], ns)
                ctx.put(phv, "mg", merge)
                ctx.mirror(emit_merge_pseudo(ns, merge, ctx.conn, phv.tsval), cfg.mirror_delay)
                ctx.count("pseudo_merges")
            ctx.put(phv, "md", SlotMode.CASCADE if ivs else SlotMode.IDLE)
        elif mode == SlotMode.SEEK:
            s = seqnum.add(ns, ctx.get(phv, "so"))
            e = seqnum.add(ns, ctx.get(phv, "eo"))
            out: list[list[int]] = []
            placed = False
            for iv in ivs:
                if seqnum.lt(iv[1], s):
                    out.append(iv)
                elif seqnum.lt(e, iv[0]):
                    if not placed:
                        out.append([s, e])
                        placed = True
                    out.append(iv)
                else:
                    s = iv[0] if seqnum.lt(iv[0], s) else s
                    e = iv[1] if seqnum.gt(iv[1], e) else e
            if not placed:
                out.append([s, e])
            ivs[:] = out
            ctx.put(phv, "md", SlotMode.DONE)
        if ivs:
            ctx.put(phv, "ia", 1)
            if cfg.sack:
                ctx.put(phv, "ih", ivs[0][0] if seqnum.gt(ivs[0][0], ns) else ns)
                ctx.put(phv, "it", ivs[0][1])
    return h
