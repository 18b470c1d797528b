"""Host library side of a connection: send/receive buffers, credit-aware
push transmission, go-back-N or SACK retransmission, replenish SYNCs, and
the unbounded oracle reassembler used as a reference.

Stream positions here are absolute byte offsets from the start of a
direction's stream; sequence numbers are ``isn + offset`` mod 2^32.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable

from . import seqnum
from .rmt import EventKind, Flag, PHV

_PAT = bytes(i % 251 for i in range(251 + 4096))


class BufferFull(RuntimeError):
    """The send buffer cannot take more bytes until data is acknowledged."""


class PayloadMismatch(AssertionError):
    """Overlapping data for the same stream offset carried different bytes."""


class AccountingError(AssertionError):
    """Host-side window or credit bookkeeping went inconsistent."""


def pattern(offset: int, n: int) -> bytes:
    """Deterministic payload: the byte at stream offset ``o`` is ``o % 251``."""
    start = offset % 251
    if n <= 4096:
        return _PAT[start:start + n]
    parts = []
    while n > 0:
        k = min(n, 4096)
        parts.append(_PAT[start:start + k])
        offset += k
        n -= k
        start = offset % 251
    return b"".join(parts)


class SendBuffer:
    """Ring of unacknowledged plus unsent bytes, addressed by stream offset."""

    def __init__(self, size: int):
        self.size = size
        self.ring = bytearray(size)
        self.una = 0  # lowest unacknowledged offset
        self.tail = 0  # end of enqueued data

    @property
    def free(self) -> int:
        return self.size - (self.tail - self.una)

    def enqueue(self, data: bytes) -> int:
        n = len(data)
        if n > self.free:
            raise BufferFull(f"{n} bytes requested, {self.free} free")
        o = self.tail % self.size
        k = min(n, self.size - o)
        self.ring[o:o + k] = data[:k]
        if k < n:
            self.ring[:n - k] = data[k:]
        self.tail += n
        return n

    def read(self, offset: int, n: int) -> bytes:
        if offset < self.una or offset + n > self.tail:
            raise IndexError(f"[{offset},{offset + n}) outside [{self.una},{self.tail})")
        o = offset % self.size
        k = min(n, self.size - o)
        if k == n:
            return bytes(self.ring[o:o + n])
        return bytes(self.ring[o:]) + bytes(self.ring[:n - k])

    def ack(self, offset: int) -> None:
        if offset > self.una:
            self.una = min(offset, self.tail)


class DoubleMappedBuffer:
    """Receive ring whose virtual range ``[0, 2*size)`` maps twice onto it.

    A write that starts below ``size`` and is at most ``size`` long is one
    contiguous range in the doubled view, so placement never splits.
    """

    def __init__(self, size: int):
        if size <= 0 or size & (size - 1):
            raise ValueError("receive buffer size must be a power of two")
        self.size = size
        self.mem = bytearray(size)

    def write(self, offset: int, data: bytes) -> None:
        n = len(data)
        if not 0 <= offset < self.size or n > self.size:
            raise ValueError(f"descriptor ({offset}, {n}) outside the double mapping")
        k = min(n, self.size - offset)
        self.mem[offset:offset + k] = data[:k]
        if k < n:
            self.mem[:n - k] = data[k:]

    def read(self, offset: int, n: int) -> bytes:
        offset %= self.size
        k = min(n, self.size - offset)
        if k == n:
            return bytes(self.mem[offset:offset + n])
        return bytes(self.mem[offset:]) + bytes(self.mem[:n - k])


@dataclass
class Message:
    start: int
    end: int
    t_enqueue: int
    t_first_tx: int | None = None
    t_acked: int | None = None
    tag: str = ""

    @property
    def fct(self) -> int | None:
        if self.t_acked is None or self.t_first_tx is None:
            return None
        return self.t_acked - self.t_first_tx


@dataclass
class HostStats:
    tx_segments: int = 0
    tx_bytes: int = 0
    retx_segments: int = 0
    retx_bytes: int = 0
    retx_ranges: list[tuple[int, int]] = field(default_factory=list)
    fast_retx: int = 0
    timeouts: int = 0
    replenish_syncs: int = 0
    probes: int = 0
    rx_bytes: int = 0


class HostConnection:
    """One connection as seen by the host library."""

    def __init__(self, conn: int, isn_tx: int = 0, isn_rx: int = 0, mss: int = 1460,
                 send_size: int = 1 << 20, recv_size: int = 65536, peer_window: int = 65536,
                 recovery: str = "gbn", replenish_frac: float = 0.25, verify: bool = True,
                 record_retx: bool = False):
        if recovery not in ("gbn", "sack"):
            raise ValueError("recovery must be 'gbn' or 'sack'")
        self.conn = conn
        self.isn_tx = isn_tx
        self.isn_rx = isn_rx
        self.mss = mss
        self.recovery = recovery
        self.sbuf = SendBuffer(send_size)
        self.rbuf = DoubleMappedBuffer(recv_size)
        self.replenish_frac = replenish_frac
        self.verify = verify
        self.record_retx = record_retx
        # transmit state
        self.credits = 0
        self.peer_right = peer_window  # offset
        self.head = 0  # next offset to transmit
        self.high = 0  # highest offset ever transmitted
        self.island: tuple[int, int] | None = None
        self.rtx: list[list[int]] = []
        self.probe = False  # persist timer fired: send one segment despite a small window
        self.messages: list[Message] = []
        self._msg_acked = 0
        self._msg_sent = 0
        # receive state
        self.frontier = 0
        self.consumed = 0
        self.replenished = 0
        self.stats = HostStats()
        self.on_readable: Callable[["HostConnection", int], None] | None = None
        self.on_acked: Callable[["HostConnection", Message, int], None] | None = None

    # -- helpers --
    def seq_of(self, offset: int) -> int:
        return (self.isn_tx + offset) & seqnum.MASK

    def _tx_off(self, seq: int) -> int:
        """Offset of a sender-side sequence number near the current una."""
        return self.sbuf.una + seqnum.diff(seq, self.seq_of(self.sbuf.una))

    def _rx_off(self, seq: int) -> int:
        return self.consumed + seqnum.diff(seq, (self.isn_rx + self.consumed) & seqnum.MASK)

    @property
    def una(self) -> int:
        return self.sbuf.una

    @property
    def unread(self) -> int:
        return self.frontier - self.consumed

    @property
    def outstanding(self) -> int:
        return self.high - self.una

    @property
    def backlog(self) -> int:
        return self.sbuf.tail - self.head

    # -- application API --
    def app_send(self, data: bytes | int, now: int = 0, tag: str = "") -> Message:
        if isinstance(data, int):
            data = pattern(self.sbuf.tail, data)
        start = self.sbuf.tail
        self.sbuf.enqueue(data)
        msg = Message(start, self.sbuf.tail, now, tag=tag)
        self.messages.append(msg)
        return msg

    def app_recv(self, max_bytes: int | None = None) -> tuple[bytes, list[PHV]]:
        """Consume ready bytes; returns ``(data, replenish SYNC PHVs)``."""
        n = self.unread if max_bytes is None else min(max_bytes, self.unread)
        if n <= 0:
            return b"", []
        data = self.rbuf.read(self.consumed % self.rbuf.size, n)
        if self.verify and data != pattern(self.consumed, n):
            raise PayloadMismatch(f"stream bytes at [{self.consumed},{self.consumed + n}) corrupted")
        self.consumed += n
        self.stats.rx_bytes += n
        return data, self.maybe_replenish()

    def maybe_replenish(self, force: bool = False) -> list[PHV]:
        due = self.consumed - self.replenished
        if due > 0 and (force or due > self.replenish_frac * self.rbuf.size):
            self.replenished = self.consumed
            self.stats.replenish_syncs += 1
            return [PHV(EventKind.SYNC, self.conn, credit=due)]
        return []

    # -- notifications from the pipeline --
    def on_rx(self, f: dict, now: int = 0) -> None:
        if "dma" in f:
            off, n = f["dma"]
            self.rbuf.write(off, bytes(f["data"]))
        if "ready" in f:
            ready = self._rx_off(f["ready"])
            if ready > self.frontier:
                if ready - self.consumed > self.rbuf.size:
                    raise AccountingError("ready frontier beyond the receive buffer")
                self.frontier = ready

    def on_tx(self, f: dict, now: int = 0) -> None:
        self.credits += f.get("credit_delta", 0)
        una = self._tx_off(f["una"])
        if una > self.sbuf.una:
            self.sbuf.ack(una)
            self._complete_messages(now)
        self.peer_right = max(self.peer_right, self._tx_off(f["peer_right"]))
        if f.get("sack") is not None:
            h, t = (self._tx_off(s) for s in f["sack"])
            self.island = (max(h, self.una), t) if t > self.una else None
        elif "sack" in f and self.island and self.island[1] <= self.una:
            self.island = None
        if f.get("probe"):
            self.probe = True
        if f.get("rtx"):
            self.stats.timeouts += 1
            self.island = None
            self.rtx.clear()
            self.head = self.una
        elif f.get("fast_retx"):
            self.stats.fast_retx += 1
            if self.recovery == "gbn":
                self.head = self.una
            else:
                self._queue_hole()
        elif f.get("partial") and self.recovery == "sack":
            self._queue_hole()
        if self.head < self.una:
            self.head = self.una

    def _queue_hole(self) -> None:
        end = self.island[0] if self.island and self.island[0] > self.una else self.una + self.mss
        end = min(end, self.high)
        if end > self.una:
            self.rtx.append([self.una, end])

    def _complete_messages(self, now: int) -> None:
        msgs = self.messages
        while self._msg_acked < len(msgs) and msgs[self._msg_acked].end <= self.sbuf.una:
            m = msgs[self._msg_acked]
            m.t_acked = now
            self._msg_acked += 1
            if self.on_acked:
                self.on_acked(self, m, now)

    # -- transmission --
    def push(self, now: int) -> list[PHV]:
        """TX PHVs allowed by credits, buffered data and the peer window."""
        out: list[PHV] = []
        mss = self.mss
        while True:
            if self.rtx:
                s, e = self.rtx[0]
                s = max(s, self.una)
                if s >= e:
                    self.rtx.pop(0)
                    continue
                n = min(mss, e - s)
                if self.credits < n:
                    break
                out.append(self._segment(s, n, now, retx=True))
                self.rtx[0][0] = s + n
                continue
            if self.recovery == "sack" and self.island and self.island[0] <= self.head < self.island[1]:
                self.head = self.island[1]
            n = min(mss, self.sbuf.tail - self.head)
            win = self.peer_right - self.head
            if self.head < self.high:
                # resent data fitted the window it first went out in, so the
                # runt rule does not apply; stop at the old high-water mark
                n = min(n, self.high - self.head)
            elif win < n:
                if not (self.probe and n > 0 and self.head == self.high and self.credits >= 1):
                    break  # no window-edge runts
                # persist probe: a runt that fits, or one byte past a closed window
                self.probe = False
                self.stats.probes += 1
                m = win if win > 0 else 1
                out.append(self._segment(self.head, m, now, retx=False, probe=win <= 0))
                self.head += m
                break
            if self.recovery == "sack" and self.island and self.head < self.island[0] < self.head + n:
                n = self.island[0] - self.head
            if n <= 0 or self.credits < n:
                break
            out.append(self._segment(self.head, n, now, retx=self.head < self.high))
            self.head += n
        return out

    def _segment(self, off: int, n: int, now: int, retx: bool, probe: bool = False) -> PHV:
        self.credits -= n
        st = self.stats
        st.tx_segments += 1
        st.tx_bytes += n
        if retx:
            st.retx_segments += 1
            st.retx_bytes += n
            if self.record_retx:
                st.retx_ranges.append((off, off + n))
        if off + n > self.high:
            self.high = off + n
        msgs = self.messages
        while self._msg_sent < len(msgs) and msgs[self._msg_sent].start < off + n:
            m = msgs[self._msg_sent]
            if m.t_first_tx is None:
                m.t_first_tx = now
            if m.end <= off + n:
                self._msg_sent += 1
            else:
                break
        return PHV(EventKind.TX, self.conn, self.seq_of(off), n, Flag.ACK | Flag.PROBE if probe else Flag.ACK,
                   payload=self.sbuf.read(off, n), tsval=(now & seqnum.MASK) or 1)


class OracleReassembler:
    """Unbounded reference reassembler over absolute stream offsets."""

    def __init__(self, verify: bool = True):
        self.starts: list[int] = []
        self.ends: list[int] = []
        self.data = bytearray()
        self.verify = verify
        self.frontier = 0

    def accept(self, offset: int, n: int, payload: bytes | None = None, right: int | None = None) -> bool:
        """Record ``[offset, offset+n)``; False when it exceeds ``right``."""
        if n <= 0:
            return True
        end = offset + n
        if right is not None and end > right:
            return False
        if payload is not None:
            if len(self.data) < end:
                self.data.extend(bytes(end - len(self.data)))
            if self.verify:
                for s, e in self._overlaps(offset, end):
                    if self.data[s:e] != payload[s - offset:e - offset]:
                        raise PayloadMismatch(f"retransmitted bytes at [{s},{e}) differ")
            self.data[offset:end] = payload
        self._insert(offset, end)
        if self.starts and self.starts[0] <= self.frontier:
            self.frontier = max(self.frontier, self.ends[0])
        return True

    def _overlaps(self, s: int, e: int) -> list[tuple[int, int]]:
        i = bisect.bisect_right(self.ends, s)
        out = []
        while i < len(self.starts) and self.starts[i] < e:
            out.append((max(s, self.starts[i]), min(e, self.ends[i])))
            i += 1
        return out

    def _insert(self, s: int, e: int) -> None:
        i = bisect.bisect_left(self.ends, s)
        j = bisect.bisect_right(self.starts, e)
        if i < j:
            s = min(s, self.starts[i])
            e = max(e, self.ends[j - 1])
        self.starts[i:j] = [s]
        self.ends[i:j] = [e]

    def intervals(self) -> list[tuple[int, int]]:
        return list(zip(self.starts, self.ends))

    def covers(self, s: int, e: int) -> bool:
        i = bisect.bisect_right(self.starts, s) - 1
        return i >= 0 and self.ends[i] >= e


def oracle_accept(oracle: OracleReassembler, seq: int, length: int, payload: bytes | None = None) -> int:
    oracle.accept(seq, length, payload)
    return oracle.frontier
