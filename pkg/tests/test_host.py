from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from laminar_sim.host import (
    BufferFull, DoubleMappedBuffer, HostConnection, OracleReassembler, PayloadMismatch, SendBuffer,
    oracle_accept, pattern,
)
from laminar_sim.netsim import HostParams, LinkConfig, Network, Sink, StreamSender, build_pair
from laminar_sim.params import DatapathConfig
from laminar_sim.rmt import EventKind, Flag


# -- oracle --------------------------------------------------------------------

def test_oracle_examples():
    o = OracleReassembler()
    assert oracle_accept(o, 0, 1000, pattern(0, 1000)) == 1000
    assert oracle_accept(o, 2000, 1000, pattern(2000, 1000)) == 1000
    assert oracle_accept(o, 1000, 1000, pattern(1000, 1000)) == 3000
    assert oracle_accept(o, 1000, 1000, pattern(1000, 1000)) == 3000
    assert o.intervals() == [(0, 3000)]


def test_oracle_permutation_reaches_total():
    rng = random.Random(3)
    segs = [(i * 1000, 1000) for i in range(1000)]
    rng.shuffle(segs)
    o = OracleReassembler()
    for off, n in segs:
        oracle_accept(o, off, n, pattern(off, n))
    assert o.frontier == 1_000_000
    assert bytes(o.data) == pattern(0, 1_000_000)


def test_oracle_detects_payload_mismatch():
    o = OracleReassembler()
    o.accept(0, 10, bytes(10))
    with pytest.raises(PayloadMismatch):
        o.accept(5, 10, bytes(range(1, 11)))


def test_oracle_window_bound():
    o = OracleReassembler()
    assert not o.accept(900, 200, None, right=1000)
    assert o.accept(800, 200, None, right=1000)
    assert o.covers(850, 1000) and not o.covers(0, 10)


@given(st.lists(st.tuples(st.integers(0, 5000), st.integers(1, 600)), max_size=80))
def test_oracle_frontier_is_longest_prefix(segs):
    o = OracleReassembler()
    have = set()
    for off, n in segs:
        o.accept(off, n, pattern(off, n))
        have.update(range(off, off + n))
        f = 0
        while f in have:
            f += 1
        assert o.frontier == f


# -- buffers ---------------------------------------------------------------------

def test_send_buffer_full_and_reclaim():
    b = SendBuffer(4096)
    b.enqueue(bytes(4000))
    with pytest.raises(BufferFull):
        b.enqueue(bytes(100))
    b.ack(1000)
    b.enqueue(pattern(4000, 900))
    assert b.read(4000, 900) == pattern(4000, 900)
    with pytest.raises(IndexError):
        b.read(500, 10)


def test_double_mapped_buffer_wraps_contiguously():
    d = DoubleMappedBuffer(1024)
    d.write(1000, pattern(1000, 100))
    assert d.read(1000, 100) == pattern(1000, 100)
    with pytest.raises(ValueError):
        DoubleMappedBuffer(1000)
    with pytest.raises(ValueError):
        d.write(1024, b"x")


# -- transmission ----------------------------------------------------------------

def tx_note(h: HostConnection, **kw) -> dict:
    f = {"una": h.seq_of(h.una), "nxt": h.seq_of(h.high), "peer_right": h.seq_of(h.peer_right),
         "sack": None, "credit_delta": 0, "fast_retx": False, "partial": False, "rtx": False, "probe": False}
    for k in ("una", "peer_right"):
        if k in kw:
            kw[k] = h.seq_of(kw[k])
    if kw.get("sack"):
        kw["sack"] = tuple(h.seq_of(x) for x in kw["sack"])
    f.update(kw)
    return f


def test_push_respects_credits():
    h = HostConnection(0, isn_tx=123)
    h.app_send(10_000)
    h.on_tx(tx_note(h, credit_delta=4380))
    segs = h.push(0)
    assert [(s.kind, s.len) for s in segs] == [(EventKind.TX, 1460)] * 3
    assert [s.seq for s in segs] == [123, 123 + 1460, 123 + 2920]
    assert h.credits == 0 and h.head == 4380


def test_timeout_rewinds_to_una():
    h = HostConnection(0, send_size=1 << 16)
    h.app_send(20_000)
    h.on_tx(tx_note(h, credit_delta=12_000))
    h.push(0)
    h.on_tx(tx_note(h, una=5000))
    assert h.head == 12_000 - 12_000 % 1460 or h.head > 5000
    h.on_tx(tx_note(h, rtx=True, credit_delta=1460))
    assert h.head == 5000
    seg = h.push(0)[0]
    assert seg.seq == 5000 and h.stats.timeouts == 1


def test_sack_fast_retx_resends_only_the_gap():
    h = HostConnection(0, recovery="sack", record_retx=True)
    h.app_send(20_000)
    h.on_tx(tx_note(h, credit_delta=14_600))
    h.push(0)
    # [1460, 2920) lost; the peer holds [2920, 14600) as its island
    h.on_tx(tx_note(h, una=1460, fast_retx=True, sack=(2920, 14_600), credit_delta=2920))
    segs = h.push(0)
    assert [(s.seq, s.len) for s in segs][0] == (1460, 1460)
    assert h.stats.retx_ranges == [(1460, 2920)]
    # the next new data starts after the island, never inside it
    assert all(not (2920 <= s.seq < 14_600) for s in segs)


def test_gbn_fast_retx_rewinds_head():
    h = HostConnection(0)
    h.app_send(20_000)
    h.on_tx(tx_note(h, credit_delta=14_600))
    h.push(0)
    h.on_tx(tx_note(h, una=1460, fast_retx=True))
    assert h.head == 1460


def test_recv_before_data_is_empty():
    h = HostConnection(0)
    assert h.app_recv() == (b"", [])


def test_replenish_after_quarter_buffer():
    h = HostConnection(0, recv_size=4096, isn_rx=7)
    h.on_rx({"dma": (0, 1500), "data": pattern(0, 1500), "ready": 7 + 1500})
    data, syncs = h.app_recv()
    assert data == pattern(0, 1500)
    assert [(s.kind, s.credit) for s in syncs] == [(EventKind.SYNC, 1500)]
    h.on_rx({"dma": (1500, 500), "data": pattern(1500, 500), "ready": 7 + 2000})
    assert h.app_recv()[1] == []
    assert h.maybe_replenish(force=True)[0].credit == 500


def test_recv_detects_corruption():
    h = HostConnection(0, recv_size=4096)
    h.on_rx({"dma": (0, 10), "data": bytes(10), "ready": 10})
    with pytest.raises(PayloadMismatch):
        h.app_recv()


def test_probe_segment_flagged_when_window_closed():
    h = HostConnection(0, peer_window=1460)
    h.app_send(5000)
    h.on_tx(tx_note(h, credit_delta=10_000))
    assert len(h.push(0)) == 1
    h.on_tx(tx_note(h, una=1460, probe=True))
    seg = h.push(0)
    assert [(s.len, bool(s.flags & Flag.PROBE)) for s in seg] == [(1, True)]
    assert h.stats.probes == 1


def test_no_runts_at_the_window_edge():
    h = HostConnection(0, peer_window=2000)
    h.app_send(5000)
    h.on_tx(tx_note(h, credit_delta=10_000))
    assert [s.len for s in h.push(0)] == [1460]


# -- end to end ------------------------------------------------------------------

def pair(loss=0.0, recovery="gbn", fidelity=1, seed=1, verify=True):
    net = Network(seed)
    dp = DatapathConfig(fidelity=fidelity, sack=recovery == "sack", rto_ns=1_000_000)
    build_pair(net, dp, {"cc": "dctcp"}, LinkConfig(10e9, 5_000, 1000, None, loss))
    a, b = net.connect("h0", "h1", HostParams(recovery=recovery, verify=verify))
    return net, a, b


def test_hello_roundtrip():
    net, a, b = pair(verify=False)
    net.sim.at(0, a.ep.send, a.conn, b"hello")
    net.run(1_000_000, drain_ns=0)
    assert b.ep.recv(b.conn) == b"hello"


@pytest.mark.parametrize("recovery", ["gbn", "sack"])
def test_ten_megabytes_under_one_percent_loss(recovery):
    net, a, b = pair(loss=0.01, recovery=recovery)
    total = 10_000_000
    net.add_app(a, StreamSender(a, total))
    sink = net.add_app(b, Sink(b, total))
    net.run(5_000_000_000)
    assert sink.done and sink.received == total
    assert b.host.frontier == total and a.host.una == total
    assert net.check_accounting() == []
