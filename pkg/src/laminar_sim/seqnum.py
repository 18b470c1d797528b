"""32-bit TCP sequence-number arithmetic (serial-number comparison)."""
from __future__ import annotations

MASK = 0xFFFFFFFF
HALF = 1 << 31


def wrap(x: int) -> int:
    return x & MASK


def add(a: int, b: int) -> int:
    return (a + b) & MASK


def diff(a: int, b: int) -> int:
    """Signed distance ``a - b`` in sequence space, in ``[-2**31, 2**31)``."""
    d = (a - b) & MASK
    return d - (1 << 32) if d >= HALF else d


def lt(a: int, b: int) -> bool:
    return diff(a, b) < 0


def le(a: int, b: int) -> bool:
    return diff(a, b) <= 0


def gt(a: int, b: int) -> bool:
    return diff(a, b) > 0


def ge(a: int, b: int) -> bool:
    return diff(a, b) >= 0


def max_seq(a: int, b: int) -> int:
    return a if diff(a, b) >= 0 else b


def to_signed32(x: int) -> int:
    x &= MASK
    return x - (1 << 32) if x >= HALF else x
