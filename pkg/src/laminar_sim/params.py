from __future__ import annotations

from dataclasses import dataclass

MTU = 1500
HEADER_BYTES = 40  # IP + TCP, no options
WIRE_OVERHEAD = 54  # Ethernet + IP + TCP on the wire
ACK_WIRE_BYTES = 64


@dataclass
class DatapathConfig:
    """Knobs of one Laminar data-path instance (one pipeline)."""

    fidelity: int | None = 1  # OOO intervals tracked; None = unbounded reference (OOO-max)
    mss: int = MTU - HEADER_BYTES
    delayed_ack: int = 1  # ACK every M in-order segments
    sack: bool = False
    rto_ns: int = 10_000_000
    notify_threshold: int = 16384  # freed TX bytes before a reclaim notification
    stage_delay: int = 30
    mirror_delay: int = 0
    feedback_depth: int = 64
    width: int = 64  # connection slots per register array
    mirror_to: str = "egress"  # re-entry point of mirrored pseudo-segments
    window_update: int = 8 * (MTU - HEADER_BYTES)  # replenish ACKs only below this window
    dupack_threshold: int = 3

    def __post_init__(self) -> None:
        if self.fidelity is not None and not 0 <= self.fidelity <= 8:
            raise ValueError(f"fidelity must be 0..8 or None, got {self.fidelity}")
        if self.delayed_ack < 1:
            raise ValueError("delayed_ack must be >= 1")
        if self.mirror_to not in ("egress", "ingress"):
            raise ValueError("mirror_to must be 'egress' or 'ingress'")
