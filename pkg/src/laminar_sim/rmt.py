"""RMT pipeline execution substrate.

Models a fixed sequence of lock-step match-action stages with stage-local
register arrays, a bounded forward-only packet header vector (PHV), and the
three feedback paths (mirror, recirculate, packet generator).  Programs carry
an access manifest that :func:`check_program` inspects statically; the same
discipline is re-checked at runtime by :class:`StageContext`.
"""
from __future__ import annotations

import enum
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from . import seqnum

SCRATCH_LIMIT = 16
DEFAULT_STAGE_DELAY_NS = 30
DEFAULT_FEEDBACK_DEPTH = 64
DEFAULT_RECIRC_BPS = 300_000_000_000
RECIRC_OVERHEAD = 64  # header bytes charged per recirculated packet


class ConstraintFault(RuntimeError):
    """A handler broke the RMT access discipline while traversing."""


class MalformedManifest(ValueError):
    """The access manifest is empty or references unknown stages/registers."""


class EventKind(enum.IntEnum):
    RX = 0
    TX = 1
    SYNC = 2
    PSEUDO_MERGE = 3
    PSEUDO_ACK = 4


class Flag:
    """Wire/PHV flag bits (plain ints: flag tests sit on the hot path)."""

    NONE = 0
    ACK = 1
    CE = 2  # ECN congestion-experienced mark set by a queue
    ECE = 4  # ECN echo on an acknowledgment
    FIN = 8  # unused; connections are torn down out of band
    RTX = 16  # SYNC signals a retransmission timeout
    GEN = 32  # SYNC produced by the packet generator (carries credits)
    PSEUDO = 64  # wire copy of a pseudo-segment (never leaves the pipeline)
    PROBE = 128  # one-byte zero-window probe, admitted past the peer's right edge


class Gress(enum.Enum):
    INGRESS = "ingress"
    EGRESS = "egress"


class Mode(enum.Enum):
    READ = "read"
    WRITE = "write"
    RMW = "rmw"

    @property
    def reads(self) -> bool:
        return self is not Mode.WRITE

    @property
    def writes(self) -> bool:
        return self is not Mode.READ


class Scratch:
    """Bounded key -> 32-bit value map with forward-only visibility.

    A value written at stage ``i`` can only be read by stages ``> i``.  Later
    stages may overwrite an existing key.
    """

    __slots__ = ("_vals", "_stage", "limit")

    def __init__(self, limit: int = SCRATCH_LIMIT):
        self._vals: dict[str, int] = {}
        self._stage: dict[str, int] = {}
        self.limit = limit

    def put(self, stage: int, key: str, value: int) -> None:
        if key not in self._vals and len(self._vals) >= self.limit:
            raise ConstraintFault(f"PHV scratch exhausted ({self.limit} entries) writing {key!r}")
        if not -seqnum.HALF <= value <= seqnum.MASK:
            raise ConstraintFault(f"scratch value {value} for {key!r} exceeds 32 bits")
        self._vals[key] = value
        self._stage[key] = stage

    def get(self, stage: int, key: str, default: int | None = None) -> int | None:
        if key not in self._vals:
            return default
        if self._stage[key] >= stage:
            raise ConstraintFault(
                f"scratch {key!r} written at stage {self._stage[key]} read at stage {stage}"
            )
        return self._vals[key]

    def free(self, *keys: str) -> None:
        """Release containers whose live range has ended."""
        for k in keys:
            self._vals.pop(k, None)
            self._stage.pop(k, None)

    def __len__(self) -> int:
        return len(self._vals)

    def keys(self) -> list[str]:
        return list(self._vals)

    def clear(self) -> None:
        self._vals.clear()
        self._stage.clear()


@dataclass(slots=True)
class PHV:
    """Packet header vector: the bounded metadata a packet carries."""

    kind: EventKind
    conn_id: int = 0
    seq: int = 0
    len: int = 0
    flags: int = Flag.NONE
    ack_seq: int = 0
    window: int = 0
    sack: tuple[int, int] | None = None
    tsval: int = 0
    tsecr: int = 0
    credit: int = 0  # SYNC: replenish bytes (host) or granted credits (generator)
    flow: int = -1  # wire flow key resolved to conn_id by demux
    payload: bytes | memoryview = b""
    scratch: Scratch = field(default_factory=Scratch)

    def wire_copy(self) -> "PHV":
        """Copy for putting on the wire; scratch metadata does not travel."""
        return PHV(
            kind=self.kind, conn_id=self.conn_id, seq=self.seq, len=self.len,
            flags=self.flags, ack_seq=self.ack_seq, window=self.window, sack=self.sack,
            tsval=self.tsval, tsecr=self.tsecr, credit=self.credit, flow=self.flow,
            payload=self.payload,
        )


class StageRegister:
    """Array of 32-bit cells (one per connection) bound to one stage."""

    __slots__ = ("name", "stage", "stage_index", "cells", "width", "signed")

    def __init__(self, name: str, stage: str, width: int, signed: bool = False, init: int = 0):
        self.name = name
        self.stage = stage
        self.stage_index = -1  # resolved when the program is assembled
        self.width = width
        self.signed = signed
        self.cells = [init] * width

    def normalize(self, value: int) -> int:
        return seqnum.to_signed32(value) if self.signed else value & seqnum.MASK

    def __repr__(self) -> str:
        return f"StageRegister({self.name!r}, stage={self.stage!r})"


Handler = Callable[["StageContext", PHV], None]


@dataclass
class Stage:
    name: str
    gress: Gress
    access: dict[str, Mode] = field(default_factory=dict)
    handler: Handler | None = None


@dataclass(frozen=True)
class AccessDecl:
    stage: str
    register: str
    mode: Mode


@dataclass(frozen=True)
class Violation:
    kind: str  # ForwardRead | BackwardWrite | DoubleRMW | IngressWrite | StageLocality
    stage: str
    register: str
    stage_index: int
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind}{{stage:{self.stage_index} ({self.stage}), reg:{self.register!r}}} {self.detail}".rstrip()


@dataclass
class Manifest:
    """Stage order, register bindings, and declared accesses of a program."""

    name: str
    stages: list[tuple[str, Gress]]
    registers: dict[str, str]  # register -> bound stage name
    accesses: list[AccessDecl]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "stages": [{"name": n, "gress": g.value} for n, g in self.stages],
            "registers": [{"name": r, "stage": s} for r, s in self.registers.items()],
            "accesses": [
                {"stage": a.stage, "register": a.register, "mode": a.mode.value}
                for a in self.accesses
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: Any) -> "Manifest":
        if not isinstance(doc, dict):
            raise MalformedManifest("manifest must be a JSON object")
        try:
            stages = [(s["name"], Gress(s.get("gress", "egress"))) for s in doc.get("stages", [])]
            registers = {r["name"]: r["stage"] for r in doc.get("registers", [])}
            accesses = [
                AccessDecl(a["stage"], a["register"], Mode(a["mode"]))
                for a in doc.get("accesses", [])
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedManifest(f"bad manifest entry: {exc}") from exc
        return cls(doc.get("name", "unnamed"), stages, registers, accesses)

    @classmethod
    def load(cls, path: str) -> "Manifest":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise MalformedManifest(f"{path}:{exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(doc)


def check_program(program: "PipelineProgram | Manifest") -> list[Violation]:
    """Statically check a program's access manifest against RMT constraints.

    Returns an empty list iff no stage reads a register bound to a later
    stage, writes a register bound to an earlier stage, touches a register
    bound to a different stage at all, RMWs one register twice, or writes
    from the ingress pipeline.
    """
    manifest = program.manifest() if isinstance(program, PipelineProgram) else program
    if not manifest.stages:
        raise MalformedManifest("program has no stages")
    index = {name: i for i, (name, _) in enumerate(manifest.stages)}
    if len(index) != len(manifest.stages):
        raise MalformedManifest("duplicate stage names")
    gress = {name: g for name, g in manifest.stages}
    seen_egress = False
    for name, g in manifest.stages:
        if g is Gress.EGRESS:
            seen_egress = True
        elif seen_egress:
            raise MalformedManifest(f"ingress stage {name!r} follows an egress stage")
    for reg, stage in manifest.registers.items():
        if stage not in index:
            raise MalformedManifest(f"register {reg!r} bound to unknown stage {stage!r}")

    out: list[Violation] = []
    writers: dict[str, str] = {}
    for acc in manifest.accesses:
        if acc.stage not in index:
            raise MalformedManifest(f"access from unknown stage {acc.stage!r}")
        if acc.register not in manifest.registers:
            raise MalformedManifest(f"stage {acc.stage!r} touches undeclared register {acc.register!r}")
        s = index[acc.stage]
        b = index[manifest.registers[acc.register]]
        v = lambda kind, why: Violation(kind, acc.stage, acc.register, s, why)  # noqa: E731
        if acc.mode.reads and s < b:
            out.append(v("ForwardRead", f"register lives in later stage {b}"))
        elif acc.mode.reads and s > b:
            out.append(v("StageLocality", f"read of register bound to earlier stage {b}"))
        if acc.mode.writes and s > b:
            out.append(v("BackwardWrite", f"register lives in earlier stage {b}"))
        elif acc.mode.writes and s < b:
            out.append(v("StageLocality", f"write of register bound to later stage {b}"))
        if acc.mode.writes:
            if gress[acc.stage] is Gress.INGRESS:
                out.append(v("IngressWrite", "ingress must be read-only"))
            if acc.register in writers:
                out.append(v("DoubleRMW", f"also modified at {writers[acc.register]!r}"))
            else:
                writers[acc.register] = acc.stage
    return out


@dataclass
class HostNotification:
    kind: str  # "rx" | "tx"
    conn_id: int
    fields: dict[str, Any]


@dataclass
class ControlException:
    kind: str
    conn_id: int
    fields: dict[str, Any] = field(default_factory=dict)


class FeedbackKind(enum.Enum):
    MIRROR = "mirror"
    RECIRCULATE = "recirculate"
    GENERATE = "generate"


@dataclass
class FeedbackOp:
    kind: FeedbackKind
    phv: PHV
    delay: int = 0
    best_effort: bool = True


@dataclass
class TraversalResult:
    emitted: list[PHV] = field(default_factory=list)
    feedback: list[FeedbackOp] = field(default_factory=list)
    notifications: list[HostNotification] = field(default_factory=list)
    exceptions: list[ControlException] = field(default_factory=list)
    dropped: bool = False
    latency: int = 0
    changed: set[str] = field(default_factory=set)


class StageContext:
    """Per-stage view handed to a handler; enforces the register discipline."""

    __slots__ = ("index", "name", "gress", "_readable", "_writable", "_written",
                 "conn", "now", "result", "program")

    def __init__(self, program: "PipelineProgram", index: int, stage: Stage):
        self.program = program
        self.index = index
        self.name = stage.name
        self.gress = stage.gress
        self._readable = frozenset(r for r, m in stage.access.items() if m.reads)
        self._writable = frozenset(r for r, m in stage.access.items() if m.writes)
        self._written: set[str] = set()
        self.conn = 0
        self.now = 0
        self.result: TraversalResult | None = None

    def _check_stage(self, reg: StageRegister) -> None:
        if reg.stage_index != self.index:
            raise ConstraintFault(
                f"stage {self.index} ({self.name}) touched {reg.name!r} bound to stage {reg.stage_index}"
            )

    def read(self, reg: StageRegister) -> int:
        if reg.name not in self._readable:
            raise ConstraintFault(f"stage {self.name!r} has no read access to {reg.name!r}")
        self._check_stage(reg)
        return reg.cells[self.conn]

    def write(self, reg: StageRegister, value: int) -> None:
        if reg.name not in self._writable:
            raise ConstraintFault(f"stage {self.name!r} has no write access to {reg.name!r}")
        if reg.name in self._written:
            raise ConstraintFault(f"second read-modify-write of {reg.name!r} in one traversal")
        self._check_stage(reg)
        self._written.add(reg.name)
        value = reg.normalize(value)
        if reg.cells[self.conn] != value:
            reg.cells[self.conn] = value
            self.result.changed.add(reg.name)

    # PHV scratch
    def put(self, phv: PHV, key: str, value: int) -> None:
        phv.scratch.put(self.index, key, int(value))

    def get(self, phv: PHV, key: str, default: int | None = None) -> int | None:
        return phv.scratch.get(self.index, key, default)

    # side effects
    def emit(self, phv: PHV) -> None:
        self.result.emitted.append(phv)

    def mirror(self, phv: PHV, delay: int = 0) -> None:
        self.result.feedback.append(FeedbackOp(FeedbackKind.MIRROR, phv, delay, True))

    def notify(self, kind: str, **fields: Any) -> None:
        self.result.notifications.append(HostNotification(kind, self.conn, fields))

    def raise_exception(self, kind: str, **fields: Any) -> None:
        self.result.exceptions.append(ControlException(kind, self.conn, fields))

    def drop(self) -> None:
        self.result.dropped = True

    def count(self, name: str, n: int = 1) -> None:
        self.program.stats[self.conn][name] += n


class PipelineProgram:
    """Ordered ingress + egress stages over stage-local register arrays."""

    def __init__(self, name: str, stages: Iterable[Stage], registers: Iterable[StageRegister],
                 width: int, stage_delay: int = DEFAULT_STAGE_DELAY_NS,
                 bounded: bool = True):
        self.name = name
        self.stages = list(stages)
        self.registers = {r.name: r for r in registers}
        self.width = width
        self.stage_delay = stage_delay
        self.bounded = bounded  # False for reference configurations with unbounded side state
        self.stats: dict[int, Counter] = defaultdict(Counter)
        index = {s.name: i for i, s in enumerate(self.stages)}
        for reg in self.registers.values():
            if reg.stage not in index:
                raise MalformedManifest(f"register {reg.name!r} bound to unknown stage {reg.stage!r}")
            reg.stage_index = index[reg.stage]
        for st in self.stages:
            for r in st.access:
                if r not in self.registers:
                    raise MalformedManifest(f"stage {st.name!r} touches undeclared register {r!r}")
        self._contexts = [StageContext(self, i, s) for i, s in enumerate(self.stages)]
        self._handlers = [s.handler for s in self.stages]
        self.egress_registers = frozenset(
            r.name for r in self.registers.values()
            if self.stages[r.stage_index].gress is Gress.EGRESS
        )

    @property
    def ingress_len(self) -> int:
        return sum(1 for s in self.stages if s.gress is Gress.INGRESS)

    @property
    def egress_len(self) -> int:
        return sum(1 for s in self.stages if s.gress is Gress.EGRESS)

    @property
    def latency(self) -> int:
        return len(self.stages) * self.stage_delay

    def manifest(self) -> Manifest:
        return Manifest(
            self.name,
            [(s.name, s.gress) for s in self.stages],
            {r.name: r.stage for r in self.registers.values()},
            [AccessDecl(s.name, r, m) for s in self.stages for r, m in s.access.items()],
        )

    def register(self, name: str) -> StageRegister:
        return self.registers[name]

    # control-plane access bypasses the per-packet discipline
    def cp_read(self, name: str, conn: int) -> int:
        return self.registers[name].cells[conn]

    def cp_write(self, name: str, conn: int, value: int) -> None:
        reg = self.registers[name]
        reg.cells[conn] = reg.normalize(value)

    def traverse(self, phv: PHV, now: int = 0) -> TraversalResult:
        if not 0 <= phv.conn_id < self.width:
            raise ConstraintFault(f"conn_id {phv.conn_id} outside register width {self.width}")
        result = TraversalResult(latency=self.latency)
        conn = phv.conn_id
        for ctx, handler in zip(self._contexts, self._handlers):
            if handler is None:
                continue
            ctx.conn = conn
            ctx.now = now
            ctx.result = result
            ctx._written.clear()
            handler(ctx, phv)
            if result.dropped:
                break
            # demux may resolve the connection in an ingress stage
            conn = phv.conn_id
            if not 0 <= conn < self.width:
                raise ConstraintFault(f"conn_id {conn} outside register width {self.width}")
        return result


def traverse(program: PipelineProgram, phv: PHV, now: int = 0) -> TraversalResult:
    return program.traverse(phv, now)


class FeedbackPort:
    """Feedback queue shared by mirror/generate ops plus a recirculation budget.

    Best-effort ops are dropped once ``depth`` ops are pending; recirculation
    additionally draws on a byte budget refilled at ``recirc_bps`` per tick.
    """

    def __init__(self, depth: int = DEFAULT_FEEDBACK_DEPTH, recirc_bps: int = DEFAULT_RECIRC_BPS,
                 tick_ns: int = 1000):
        self.depth = depth
        self.recirc_bps = recirc_bps
        self.tick_ns = tick_ns
        self.pending = 0
        self.injected = 0
        self.accepted = 0
        self.dropped = 0
        self._tick = -1
        self._budget = 0

    def _refill(self, now: int) -> None:
        tick = now // self.tick_ns
        if tick != self._tick:
            self._tick = tick
            self._budget = self.recirc_bps * self.tick_ns // 8_000_000_000

    def inject(self, op: FeedbackOp, now: int = 0) -> bool:
        self.injected += 1
        self._refill(now)
        ok = inject_feedback(op, self.pending, self.depth, self._budget) is Admission.ACCEPTED
        if ok and op.kind is FeedbackKind.RECIRCULATE:
            self._budget -= op.phv.len + RECIRC_OVERHEAD
        if ok:
            self.accepted += 1
            self.pending += 1
        else:
            self.dropped += 1
        return ok

    def complete(self) -> None:
        self.pending -= 1


class Admission(enum.Enum):
    ACCEPTED = "accepted"
    DROPPED = "dropped"


def inject_feedback(op: FeedbackOp, queue_depth: int, limit: int = DEFAULT_FEEDBACK_DEPTH,
                    recirc_budget: int | None = None) -> Admission:
    """Admission decision for one feedback op.

    ``recirc_budget`` is the recirculation byte budget left in the current
    tick; it only constrains :attr:`FeedbackKind.RECIRCULATE` ops.
    """
    if op.best_effort and queue_depth >= limit:
        return Admission.DROPPED
    if op.kind is FeedbackKind.RECIRCULATE and recirc_budget is not None:
        if op.phv.len + RECIRC_OVERHEAD > recirc_budget:
            return Admission.DROPPED
    return Admission.ACCEPTED
