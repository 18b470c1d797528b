"""Transmit-side data path: admission, transmit window, ACK processing, fast
retransmit, sender SACK island, credit-based rate control, host
notification, congestion signals, plus the SYNC generator schedule.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import seqnum
from .params import DatapathConfig
from .rmt import EventKind, Flag, Gress, Mode, PHV, Stage, StageContext, StageRegister


class Admit(enum.Enum):
    TRANSMIT = "transmit"
    DROP_STALE = "drop_stale"
    CLAMP = "clamp"


@dataclass(frozen=True)
class AdmitResult:
    decision: Admit
    seq: int
    len: int
    snd_nxt: int


def tx_admit(snd_una: int, snd_nxt: int, peer_right: int, seq: int, length: int) -> AdmitResult:
    """Trim below the ACK point and clamp to the peer's advertised right edge."""
    end = seqnum.add(seq, length)
    if seqnum.le(end, snd_una):
        return AdmitResult(Admit.DROP_STALE, seq, 0, snd_nxt)
    decision = Admit.TRANSMIT
    if seqnum.lt(seq, snd_una):
        seq = snd_una
    if seqnum.gt(end, peer_right):
        end = peer_right
        decision = Admit.CLAMP
    length = seqnum.diff(end, seq)
    if length <= 0:
        return AdmitResult(Admit.CLAMP, seq, 0, snd_nxt)
    return AdmitResult(decision, seq, length, seqnum.max_seq(snd_nxt, end))


class Rate(enum.Enum):
    PASS = "pass"
    DEFER = "defer"


def rate_enforce(credits: int, length: int) -> tuple[Rate, int]:
    if credits >= length:
        return Rate.PASS, credits - length
    return Rate.DEFER, credits


def halve_credits(credits: int, mss: int) -> int:
    """Reno-style reduction with a one-segment floor."""
    if credits <= mss:
        return credits
    return max(credits // 2, min(credits, mss))


def grant_credits(credits: int, grant: int, cap: int) -> int:
    """Credits accumulate across SYNCs up to ``cap``."""
    if credits >= cap:
        return credits
    return min(credits + grant, cap)


@dataclass(frozen=True)
class AckResult:
    acked: int
    snd_una: int
    dup_acks: int
    recover: int
    fast_retx: bool = False
    partial: bool = False
    is_dup: bool = False
    anomaly: bool = False


def process_ack(snd_una: int, snd_nxt: int, dup_acks: int, recover: int, ack: int,
                pure: bool = True, window_changed: bool = False, threshold: int = 3) -> AckResult:
    """Cumulative-ACK and duplicate-ACK logic (NewReno-style recovery point).

    A fast retransmit fires on exactly the ``threshold``-th duplicate, and
    only when the ACK point has moved past the previous recovery point.
    """
    anomaly = seqnum.gt(ack, snd_nxt)
    if anomaly:
        ack = snd_nxt
    if seqnum.gt(ack, snd_una):
        partial = seqnum.lt(ack, recover)
        return AckResult(seqnum.diff(ack, snd_una), ack, 0, recover, partial=partial, anomaly=anomaly)
    if ack == snd_una and pure and not window_changed and snd_nxt != snd_una:
        dup = dup_acks + 1
        if dup == threshold and seqnum.gt(snd_una, recover):
            return AckResult(0, snd_una, dup, snd_nxt, fast_retx=True, is_dup=True, anomaly=anomaly)
        return AckResult(0, snd_una, dup, recover, is_dup=True, anomaly=anomaly)
    return AckResult(0, snd_una, dup_acks, recover, anomaly=anomaly)


def sack_update(head: int, tail: int, acked: int, block: tuple[int, int] | None,
                snd_una: int) -> tuple[int, int]:
    """Sender-side island as offsets from ``snd_una`` (OOO-1 rules).

    The island slides down with the ACK point.  A reported block initializes
    an empty island, merges when it overlaps or touches, replaces the island
    when it lies beyond it, and is ignored when it lies wholly below it (the
    tail stage cannot see the head, so it could not shrink the tail).
    """
    if tail:
        tail = max(tail - acked, 0)
        head = max(head - acked, 0) if tail else 0
    if block is not None:
        so = max(seqnum.diff(block[0], snd_una), 0)
        eo = seqnum.diff(block[1], snd_una)
        if eo > so:
            if not tail or so > tail:
                head, tail = so, eo
            elif eo >= head:
                head, tail = min(head, so), max(tail, eo)
    if not tail:
        head = 0
    return head, tail


# -- SYNC generator schedule ---------------------------------------------------

def credits_for(rate_bps: float, interval_ns: int) -> int:
    """Credits (bytes) granted per SYNC at ``rate_bps`` bytes/s."""
    return max(1, int(rate_bps * interval_ns // 1_000_000_000))


@dataclass
class SyncEntry:
    rate: float  # bytes per second
    interval: int  # ns
    credits_per_sync: int
    rtt_ns: int = 20_000
    active: bool = True
    next_at: int = 0
    last_activity: int = 0


@dataclass
class SyncSchedule:
    """Per-connection SYNC programming owned by the packet generator."""

    idle_rtts: int = 4
    target_segments: int = 4
    mss: int = 1460
    min_interval: int = 4_000
    max_interval: int = 200_000
    entries: dict[int, SyncEntry] = field(default_factory=dict)

    def interval_for(self, rate: float) -> int:
        want = int(self.target_segments * self.mss * 1e9 / max(rate, 1.0))
        return min(max(want, self.min_interval), self.max_interval)

    def program(self, conn: int, rate: float, rtt_ns: int | None = None, now: int = 0) -> SyncEntry:
        e = self.entries.get(conn)
        interval = self.interval_for(rate)
        if e is None:
            e = SyncEntry(rate, interval, credits_for(rate, interval), next_at=now, last_activity=now)
            self.entries[conn] = e
        else:
            e.rate, e.interval = rate, interval
            e.credits_per_sync = credits_for(rate, interval)
        if rtt_ns:
            e.rtt_ns = rtt_ns
        return e

    def note_activity(self, conn: int, now: int) -> None:
        e = self.entries.get(conn)
        if e is not None:
            e.last_activity = now

    def resume(self, conn: int, now: int) -> bool:
        e = self.entries.get(conn)
        if e is None or e.active:
            return False
        e.active = True
        e.last_activity = now
        e.next_at = now
        return True

    def remove(self, conn: int) -> None:
        self.entries.pop(conn, None)


def schedule_syncs(schedule: SyncSchedule, now: int, outstanding=None) -> list[PHV]:
    """SYNC PHVs due at ``now``; idle connections with nothing in flight pause.

    ``outstanding(conn)`` reports unacknowledged bytes; connections with data
    in flight keep their SYNCs because they double as the timeout clock.
    """
    out: list[PHV] = []
    for conn, e in schedule.entries.items():
        if not e.active or now < e.next_at:
            continue
        idle = now - e.last_activity > schedule.idle_rtts * e.rtt_ns
        if idle and (outstanding is None or outstanding(conn) == 0):
            e.active = False
            continue
        out.append(PHV(EventKind.SYNC, conn, flags=Flag.GEN, credit=e.credits_per_sync))
        e.next_at = now + e.interval
    return out


# -- stage handlers ---------------------------------------------------------------

def _is_ack(phv: PHV) -> bool:
    return phv.kind is EventKind.RX and bool(phv.flags & Flag.ACK)


def _is_gen_sync(phv: PHV) -> bool:
    return phv.kind is EventKind.SYNC and bool(phv.flags & Flag.GEN)


MAX_RTO_SHIFT = 4  # backoff caps at 16x the base RTO


def build_tx(cfg: DatapathConfig) -> tuple[list[Stage], list[StageRegister]]:
    w = cfg.width
    regs: list[StageRegister] = []
    stages: list[Stage] = []
    rto_us = max(cfg.rto_ns // 1000, 1)
    mss = cfg.mss

    def reg(name: str, stage: str, signed: bool = False) -> StageRegister:
        r = StageRegister(name, stage, w, signed)
        regs.append(r)
        return r

    # -- peer window (right edge) --
    r_pr = reg("peer_right", "tx.peer")

    def h_peer(ctx: StageContext, phv: PHV) -> None:
        pr = ctx.read(r_pr)
        if _is_ack(phv):
            right = seqnum.add(phv.ack_seq, phv.window)
            if seqnum.gt(right, pr):
                ctx.write(r_pr, right)
                pr = right
                ctx.put(phv, "wchg", 1)
        ctx.put(phv, "pr", pr)

    stages.append(Stage("tx.peer", Gress.EGRESS, {"peer_right": Mode.RMW}, h_peer))

    # -- transmit window: snd_una / snd_nxt / timer --
    r_una = reg("snd_una", "tx.una")
    r_nxt = reg("snd_nxt", "tx.una")
    r_t = reg("una_time", "tx.una")
    r_bo = reg("rto_shift", "tx.una")  # exponential backoff exponent

    def h_una(ctx: StageContext, phv: PHV) -> None:
        una, nxt = ctx.read(r_una), ctx.read(r_nxt)
        now_us = (ctx.now // 1000) & seqnum.MASK
        if _is_ack(phv):
            ack = phv.ack_seq
            if seqnum.gt(ack, nxt):
                ctx.count("ack_anomaly")
                ack = nxt
            if seqnum.gt(ack, una):
                ctx.put(phv, "acked", seqnum.diff(ack, una))
                ctx.write(r_una, ack)
                ctx.write(r_t, now_us)
                if ctx.read(r_bo):
                    ctx.write(r_bo, 0)
                una = ack
        elif phv.kind is EventKind.TX and phv.len > 0:
            res = tx_admit(una, nxt, ctx.get(phv, "pr"), phv.seq, phv.len)
            if phv.flags & Flag.PROBE and phv.len == 1 and phv.seq == nxt and una == nxt and res.len == 0:
                res = AdmitResult(Admit.TRANSMIT, nxt, 1, seqnum.add(nxt, 1))
            if res.decision is Admit.DROP_STALE or res.len == 0:
                # not sent, but still charged at the credit stage so the host's
                # credit mirror stays exact
                ctx.count("tx_stale" if res.decision is Admit.DROP_STALE else "tx_clamped")
                ctx.put(phv, "xd", 1)
                ctx.put(phv, "una", una)
                ctx.put(phv, "nxt", nxt)
                return
            if res.decision is Admit.CLAMP:
                ctx.count("tx_clamped")
            cut = seqnum.diff(res.seq, phv.seq)
            if cut or res.len != phv.len:
                ctx.put(phv, "ch", phv.len)
                if phv.payload:
                    phv.payload = phv.payload[cut:cut + res.len]
                phv.seq, phv.len = res.seq, res.len
            if una == nxt:
                ctx.write(r_t, now_us)  # timer starts when data goes in flight
            if res.snd_nxt != nxt:
                ctx.write(r_nxt, res.snd_nxt)
                nxt = res.snd_nxt
        elif _is_gen_sync(phv):
            shift = ctx.read(r_bo)
            if (now_us - ctx.read(r_t)) & seqnum.MASK >= rto_us << shift:
                # with data in flight this is a timeout; with nothing in flight
                # and a peer window under one segment it is the persist timer
                if una != nxt:
                    ctx.put(phv, "rtx", 1)
                elif seqnum.diff(ctx.get(phv, "pr"), nxt) < mss:
                    ctx.put(phv, "pb", 1)
                else:
                    shift = -1
                if shift >= 0:
                    ctx.write(r_t, now_us)
                    if shift < MAX_RTO_SHIFT:
                        ctx.write(r_bo, shift + 1)
        ctx.put(phv, "una", una)
        ctx.put(phv, "nxt", nxt)

    stages.append(Stage("tx.una", Gress.EGRESS,
                        {"snd_una": Mode.RMW, "snd_nxt": Mode.RMW, "una_time": Mode.RMW,
                         "rto_shift": Mode.RMW}, h_una))

    # -- duplicate ACKs / fast retransmit --
    r_dup = reg("dup_acks", "tx.dup")
    r_rec = reg("recover", "tx.dup")
    thr = cfg.dupack_threshold

    def h_dup(ctx: StageContext, phv: PHV) -> None:
        if _is_ack(phv):
            dup, rec = ctx.read(r_dup), ctx.read(r_rec)
            acked = ctx.get(phv, "acked", 0)
            una, nxt = ctx.get(phv, "una"), ctx.get(phv, "nxt")
            una_old = seqnum.add(una, -acked) if acked else una
            res = process_ack(una_old, nxt, dup, rec, seqnum.add(una_old, acked) if acked else phv.ack_seq,
                              pure=phv.len == 0, window_changed=bool(ctx.get(phv, "wchg", 0)),
                              threshold=thr)
            if res.dup_acks != dup:
                ctx.write(r_dup, res.dup_acks)
            if res.recover != rec:
                ctx.write(r_rec, res.recover)
            if res.is_dup:
                ctx.put(phv, "dp", 1)
            if res.fast_retx:
                ctx.put(phv, "fr", 1)
            if res.partial:
                ctx.put(phv, "pa", 1)
        elif ctx.get(phv, "rtx", 0):
            ctx.write(r_dup, 0)
            ctx.write(r_rec, ctx.get(phv, "nxt"))

    stages.append(Stage("tx.dup", Gress.EGRESS, {"dup_acks": Mode.RMW, "recover": Mode.RMW}, h_dup))

    # -- sender SACK island --
    if cfg.sack:
        r_st = reg("sack_tail", "tx.sack_tail")
        r_sh = reg("sack_head", "tx.sack_head")

        def h_sack_tail(ctx: StageContext, phv: PHV) -> None:
            if ctx.get(phv, "rtx", 0):
                ctx.write(r_st, 0)  # timeouts fall back to go-back-N
                return
            if _is_ack(phv) or _is_gen_sync(phv):
                t = ctx.read(r_st)
                ctx.put(phv, "to", t)
                if _is_ack(phv):
                    # the new tail never depends on the head
                    _, new = sack_update(0, t, ctx.get(phv, "acked", 0), phv.sack,
                                         ctx.get(phv, "una"))
                    if new != t:
                        ctx.write(r_st, new)

        def h_sack_head(ctx: StageContext, phv: PHV) -> None:
            if ctx.get(phv, "rtx", 0):
                ctx.write(r_sh, 0)
                return
            t_old = ctx.get(phv, "to")
            if t_old is None:
                return
            h = ctx.read(r_sh)
            una = ctx.get(phv, "una")
            if _is_ack(phv):
                new_h, new_t = sack_update(h, t_old, ctx.get(phv, "acked", 0), phv.sack, una)
                if new_h != h:
                    ctx.write(r_sh, new_h)
            else:
                new_h, new_t = h, t_old
            if new_t:
                ctx.put(phv, "sh", seqnum.add(una, new_h))
                ctx.put(phv, "st", seqnum.add(una, new_t))

        stages.append(Stage("tx.sack_tail", Gress.EGRESS, {"sack_tail": Mode.RMW}, h_sack_tail))
        stages.append(Stage("tx.sack_head", Gress.EGRESS, {"sack_head": Mode.RMW}, h_sack_head))

    # -- credits --
    r_cr = reg("credits", "tx.credits", signed=True)
    r_cap = reg("credit_cap", "tx.credits")

    def h_credits(ctx: StageContext, phv: PHV) -> None:
        cr = ctx.read(r_cr)
        new = cr
        if _is_gen_sync(phv):
            new = grant_credits(cr, phv.credit, ctx.read(r_cap))
            ctx.count("credit_granted", new - cr)
        elif phv.kind is EventKind.TX and phv.len > 0:
            charge = ctx.get(phv, "ch", phv.len)
            decision, new = rate_enforce(cr, charge)
            if decision is Rate.DEFER or ctx.get(phv, "xd", 0):
                # dropped segments are charged anyway; see the stale case above
                if decision is Rate.DEFER:
                    ctx.count("tx_defer")
                ctx.count("credit_consumed", charge)
                ctx.write(r_cr, cr - charge)
                ctx.drop()
                return
            ctx.count("credit_consumed", charge)
        elif ctx.get(phv, "fr", 0):
            new = halve_credits(cr, mss)
            ctx.count("credit_revoked", cr - new)
        if new != cr:
            ctx.write(r_cr, new)
            ctx.put(phv, "cd", new - cr)

    stages.append(Stage("tx.credits", Gress.EGRESS,
                        {"credits": Mode.RMW, "credit_cap": Mode.READ}, h_credits))

    # -- TX-side application notification --
    r_nu = reg("notified_una", "tx.notify")
    threshold = cfg.notify_threshold

    def h_notify(ctx: StageContext, phv: PHV) -> None:
        gen = _is_gen_sync(phv)
        if not (gen or _is_ack(phv)):
            return
        una, nxt = ctx.get(phv, "una"), ctx.get(phv, "nxt")
        nu = ctx.read(r_nu)
        fr, pa, rtx = ctx.get(phv, "fr", 0), ctx.get(phv, "pa", 0), ctx.get(phv, "rtx", 0)
        wchg = ctx.get(phv, "wchg", 0)
        freed = seqnum.diff(una, nu)
        cd = ctx.get(phv, "cd", 0)
        pb = ctx.get(phv, "pb", 0)
        if (gen and (cd or rtx or pb)) or fr or pa or wchg or freed >= threshold or (una == nxt and freed > 0):
            sh = ctx.get(phv, "sh")
            ctx.notify("tx", una=una, nxt=nxt, peer_right=ctx.get(phv, "pr"),
                       sack=(sh, ctx.get(phv, "st")) if sh is not None else None,
                       credit_delta=cd, fast_retx=bool(fr),
                       partial=bool(pa), rtx=bool(rtx), probe=bool(pb))
            if una != nu:
                ctx.write(r_nu, una)

    stages.append(Stage("tx.notify", Gress.EGRESS, {"notified_una": Mode.RMW}, h_notify))

    # -- congestion signals harvested by the control plane --
    sig = {n: reg(n, "sig") for n in ("acked_bytes", "ecn_bytes", "dupacks", "fretx", "rtos", "rtt_ewma")}

    def bump(ctx: StageContext, name: str, n: int) -> None:
        r = sig[name]
        ctx.write(r, ctx.read(r) + n)

    def h_sig(ctx: StageContext, phv: PHV) -> None:
        if _is_ack(phv):
            acked = ctx.get(phv, "acked", 0)
            if acked:
                bump(ctx, "acked_bytes", acked)
                if phv.flags & Flag.ECE:
                    bump(ctx, "ecn_bytes", acked)
                if phv.tsecr:
                    rtt = (ctx.now - phv.tsecr) & seqnum.MASK
                    old = ctx.read(sig["rtt_ewma"])
                    ctx.write(sig["rtt_ewma"], rtt if old == 0 else old + (rtt - old) // 8)
            if ctx.get(phv, "dp", 0):
                bump(ctx, "dupacks", 1)
                ctx.count("dupacks")
            if ctx.get(phv, "fr", 0):
                bump(ctx, "fretx", 1)
                ctx.count("fast_retx")
        elif ctx.get(phv, "rtx", 0):
            bump(ctx, "rtos", 1)
            ctx.count("timeouts")

    stages.append(Stage("sig", Gress.EGRESS, {n: Mode.RMW for n in sig}, h_sig))
    return stages, regs
