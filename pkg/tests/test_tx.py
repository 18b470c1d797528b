from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from harness import FLOW, Quiescent
from laminar_sim import seqnum
from laminar_sim.rmt import EventKind, Flag, PHV
from laminar_sim.tx import (
    Admit, MAX_RTO_SHIFT, Rate, SyncSchedule, credits_for, grant_credits, halve_credits,
    process_ack, rate_enforce, sack_update, schedule_syncs, tx_admit,
)


def test_admit_examples():
    assert tx_admit(5000, 5000, 5000 + 8192, 4000, 1000).decision is Admit.DROP_STALE
    r = tx_admit(5000, 5000, 5000 + 8192, 5000, 1460)
    assert (r.decision, r.seq, r.len, r.snd_nxt) == (Admit.TRANSMIT, 5000, 1460, 6460)
    r = tx_admit(5000, 5000, 5000 + 1000, 5000, 1460)
    assert (r.decision, r.seq, r.len) == (Admit.CLAMP, 5000, 1000)


def test_admit_trims_below_una_and_keeps_snd_nxt():
    r = tx_admit(5000, 9000, 20000, 4000, 2000)
    assert (r.seq, r.len, r.snd_nxt) == (5000, 1000, 9000)


def test_rate_examples():
    assert rate_enforce(4096, 1460) == (Rate.PASS, 2636)
    assert rate_enforce(1000, 1460) == (Rate.DEFER, 1000)


def test_halving_has_one_segment_floor():
    assert halve_credits(8000, 1460) == 4000
    assert halve_credits(2000, 1460) == 1460
    assert halve_credits(1000, 1460) == 1000


def test_credits_per_sync():
    assert credits_for(12.5e6, 1_000_000) == 12500


@given(st.floats(1e6, 2e9), st.integers(4_000, 200_000), st.integers(1460, 200_000),
       st.lists(st.integers(0, 3000), min_size=1, max_size=400))
def test_token_bucket_bound(rate, interval, cap, demands):
    """Bytes passed over T never exceed rate*T + cap."""
    grant = credits_for(rate, interval)
    credits = passed = 0
    for d in demands:
        credits = grant_credits(credits, grant, cap)
        assert credits <= max(cap, grant)
        if d:
            res, credits = rate_enforce(credits, d)
            passed += d if res is Rate.PASS else 0
    assert passed <= grant * len(demands) + cap


def test_ack_advances():
    r = process_ack(5000, 10000, 2, 4999, 6460)
    assert (r.acked, r.snd_una, r.dup_acks) == (1460, 6460, 0)


def test_ack_beyond_snd_nxt_is_clamped():
    r = process_ack(5000, 6000, 0, 4999, 9000)
    assert r.anomaly and r.snd_una == 6000


def test_third_duplicate_triggers_fast_retransmit():
    dup, rec, fired = 0, 4999, []
    for _ in range(6):
        r = process_ack(5000, 9000, dup, rec, 5000)
        dup, rec = r.dup_acks, r.recover
        fired.append(r.fast_retx)
    assert fired == [False, False, True, False, False, False]


def test_window_update_is_not_a_duplicate():
    assert process_ack(5000, 9000, 2, 4999, 5000, window_changed=True).dup_acks == 2
    assert process_ack(5000, 5000, 2, 4999, 5000).dup_acks == 2  # nothing in flight


@given(st.lists(st.tuples(st.integers(0, 3000), st.integers(0, 2)), max_size=200), st.integers(0, seqnum.MASK))
def test_una_monotone_and_one_fast_retx_per_episode(steps, isn):
    una = nxt = isn
    rec = seqnum.add(isn, -1)
    dup = 0
    episodes: dict[int, int] = {}
    for step, kind in steps:
        if kind == 0:
            nxt = seqnum.add(nxt, step)
            continue
        ack = una if kind == 1 else seqnum.add(una, min(step, seqnum.diff(nxt, una)))
        r = process_ack(una, nxt, dup, rec, ack)
        assert seqnum.ge(r.snd_una, una)
        if r.fast_retx:
            episodes[rec] = episodes.get(rec, 0) + 1
        una, dup, rec = r.snd_una, r.dup_acks, r.recover
    assert all(n == 1 for n in episodes.values())


def test_sack_island_from_block():
    assert sack_update(0, 0, 0, (7920, 9380), 5000) == (2920, 4380)


def test_sack_island_slides_and_merges():
    h, t = sack_update(2920, 4380, 1460, None, 6460)
    assert (h, t) == (1460, 2920)
    assert sack_update(h, t, 0, (9380, 10840), 6460) == (1460, 4380)
    assert sack_update(1460, 2920, 3000, None, 9460) == (0, 0)


def test_sync_schedule_pauses_idle_connections():
    sch = SyncSchedule(idle_rtts=4)
    sch.program(0, 12.5e6, rtt_ns=20_000, now=0)
    assert len(schedule_syncs(sch, 0)) == 1
    assert schedule_syncs(sch, 4 * 20_000 + 200_001) == []
    assert not sch.entries[0].active
    assert sch.resume(0, 500_000)
    assert len(schedule_syncs(sch, 500_000)) == 1


def test_sync_schedule_keeps_clock_with_data_in_flight():
    sch = SyncSchedule(idle_rtts=4)
    sch.program(0, 12.5e6, rtt_ns=20_000)
    assert schedule_syncs(sch, 10**9, outstanding=lambda c: 1460)


# -- pipeline ------------------------------------------------------------------

class TxBench:
    def __init__(self, rto_ns=10_000_000, peer_window=65536):
        self.q = Quiescent(1, rto_ns=rto_ns, peer_window=peer_window)
        self.p, self.c = self.q.program, self.q.conn

    def run(self, phv, now=0):
        r = self.p.traverse(phv, now)
        return [n.fields for n in r.notifications if n.kind == "tx"], r.emitted

    def sync(self, now, credit=0):
        return self.run(PHV(EventKind.SYNC, self.c, flags=Flag.GEN, credit=credit), now)[0]

    def send(self, seq, n, now=0, flags=Flag.ACK):
        return self.run(PHV(EventKind.TX, self.c, seq, n, flags), now)[1]

    def ack(self, a, now=0, window=65536, sack=None):
        return self.run(PHV(EventKind.RX, flow=FLOW, flags=Flag.ACK, ack_seq=a, window=window, sack=sack), now)[0]


def test_pipeline_fast_retx_halves_credits():
    b = TxBench()
    b.sync(0, 20000)
    for i in range(5):
        assert b.send(i * 1460, 1460, 1000)[0].len == 1460
    b.ack(1460, 2000)
    notes = [b.ack(1460, 3000) for _ in range(3)]
    assert [bool(n and n[0]["fast_retx"]) for n in notes] == [False, False, True]
    assert b.p.cp_read("credits", b.c) == (20000 - 7300) // 2


def test_pipeline_credits_defer_when_exhausted():
    b = TxBench()
    b.sync(0, 1000)
    assert b.send(0, 1460) == []


def test_timeout_sync_with_backoff():
    rto = 1_000_000
    b = TxBench(rto)
    b.sync(0, 20000)
    b.send(0, 1460, 0)
    flags = []
    t = 0
    for _ in range(150):
        t += rto // 2
        n = b.sync(t)
        flags.append(t if n and n[0]["rtx"] else None)
    fired = [x for x in flags if x is not None]
    gaps = [b2 - a for a, b2 in zip(fired, fired[1:])]
    assert gaps[:MAX_RTO_SHIFT] == [rto * 2 ** (k + 1) for k in range(MAX_RTO_SHIFT)]
    assert all(g == rto * 2 ** MAX_RTO_SHIFT for g in gaps[MAX_RTO_SHIFT:])
    assert b.p.cp_read("rto_shift", b.c) == MAX_RTO_SHIFT
    b.ack(1460, t + 1)
    assert b.p.cp_read("rto_shift", b.c) == 0


def test_no_timeout_without_outstanding_data():
    b = TxBench(1_000_000)
    b.sync(0, 20000)
    assert not any(n["rtx"] for n in b.sync(50_000_000))


def test_zero_window_persist_probe():
    b = TxBench(1_000_000, peer_window=1460)
    b.sync(0, 20000)
    b.send(0, 1460)
    b.ack(1460, 10, window=0)
    b.sync(20, 1460)  # credits are capped at the peer window
    notes = b.sync(2_000_000)
    assert notes[0]["probe"] and not notes[0]["rtx"]
    # a one-byte probe is admitted past the closed window; ordinary data is not
    assert b.send(1460, 1000) == []
    assert b.send(1460, 1, 2_000_001) == []
    out = b.send(1460, 1, 2_000_001, Flag.ACK | Flag.PROBE)
    assert [(e.seq, e.len) for e in out] == [(1460, 1)]


def test_stale_tx_dropped():
    b = TxBench()
    b.sync(0, 20000)
    b.send(0, 1460)
    b.ack(1460)
    assert b.send(0, 1460) == []
    assert b.p.stats[b.c]["tx_stale"] >= 1
