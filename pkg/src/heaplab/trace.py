"""Line-delimited JSON traces and their replay against a Region.

One event per line::

    {"op":"open","capacity":4096}
    {"op":"malloc","id":"a","size":96}
    {"op":"overflow","id":"a","offset_in_block":0,"byte_count":120,"fill_byte":65}
    {"op":"free","id":"a"}

Blank lines are ignored.  Every op has a fixed field set; missing or extra
fields are parse errors.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .arena import WORD
from .errors import (
    CapacityInvalid,
    CorruptionDetected,
    HeapError,
    MissingField,
    OutOfMemory,
    ParseError,
    ReplayError,
    UnknownOp,
)
from .freetree import SLOTS, T_D
from .linkcodec import KEYED_MIX, MASK64
from .region import CACHE_SLOTS, Region, RegionStats, vmopen

CLEAN = "clean"
DETECTED = "corruption_detected"
MISSED = "corruption_missed"

FIELDS = {
    "open": ("capacity",),
    "malloc": ("id", "size"),
    "free": ("id",),
    "resize": ("id", "size"),
    "clear": (),
    "flush": (),
    "overflow": ("id", "offset_in_block", "byte_count", "fill_byte"),
    "tamper_link": ("id", "target", "raw_value"),
    "double_free": ("id",),
    "stats": (),
}

_CACHE_TARGET = re.compile(r"cache\[(\d+)\]\Z")
_LINK_TARGETS = ("t_p", "t_l", "t_r", "t_n", "t_d")


@dataclass(frozen=True)
class TraceEvent:
    op: str
    id: Optional[str] = None
    size: Optional[int] = None
    capacity: Optional[int] = None
    offset_in_block: Optional[int] = None
    byte_count: Optional[int] = None
    fill_byte: Optional[int] = None
    target: Optional[str] = None
    raw_value: Optional[int] = None

    def to_json(self) -> str:
        body = {"op": self.op}
        for name in FIELDS[self.op]:
            body[name] = getattr(self, name)
        return json.dumps(body, separators=(",", ":"))


def _check_value(name: str, value, line: int) -> None:
    def bad(why: str):
        raise ParseError(f"field {name!r} {why}", line)

    if name == "id":
        if not isinstance(value, str) or not value:
            bad("must be a non-empty string")
        return
    if name == "target":
        if value not in _LINK_TARGETS:
            m = _CACHE_TARGET.match(value) if isinstance(value, str) else None
            if not m or int(m.group(1)) >= CACHE_SLOTS:
                bad("must be one of t_p, t_l, t_r, t_n, t_d or cache[0..31]")
        return
    if not isinstance(value, int) or isinstance(value, bool):
        bad("must be an integer")
    low, high = {
        "size": (1, None),
        "capacity": (1, None),
        "offset_in_block": (0, None),
        "byte_count": (0, None),
        "fill_byte": (0, 255),
        "raw_value": (0, MASK64),
    }[name]
    if value < low or (high is not None and value > high):
        bad(f"out of range [{low}, {high if high is not None else 'inf'}]")


def parse_event(text: str, line: int = 1) -> TraceEvent:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line, exc.colno) from None
    if not isinstance(obj, dict):
        raise ParseError("event must be a JSON object", line)
    if "op" not in obj:
        raise MissingField("missing field 'op'", line)
    op = obj["op"]
    if op not in FIELDS:
        raise UnknownOp(f"unknown op {op!r}", line)
    wanted = FIELDS[op]
    for name in wanted:
        if name not in obj:
            raise MissingField(f"{op} needs field {name!r}", line)
    extra = sorted(set(obj) - set(wanted) - {"op"})
    if extra:
        raise ParseError(f"unexpected field {extra[0]!r} for {op}", line)
    for name in wanted:
        _check_value(name, obj[name], line)
    return TraceEvent(op=op, **{name: obj[name] for name in wanted})


def parse_trace(text: str) -> list[TraceEvent]:
    events = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        if raw.strip():
            events.append(parse_event(raw, lineno))
    return events


def dump_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(ev.to_json() + "\n" for ev in events)


@dataclass
class RunReport:
    verdict: str
    detection_event: Optional[dict]
    stats: RegionStats
    events: list[dict]
    seed: int
    codec: str
    hardened: bool
    attack_landed: bool = False
    audit: list[str] = field(default_factory=list)
    region: Optional[Region] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "detection_event": self.detection_event,
            "stats": self.stats.as_dict(),
            "events": self.events,
            "seed": self.seed,
            "codec": self.codec,
            "hardened": self.hardened,
            "attack_landed": self.attack_landed,
            "audit": self.audit,
        }


def _metadata_bytes(vm: Region) -> Optional[set[int]]:
    """Word offsets holding allocator metadata, from a walk of the tiling.

    None when the heap can no longer be walked.
    """
    words: set[int] = set()
    try:
        for off, hdr in vm.arena.chunks():
            words.add(off)
            words.add(off + hdr.size - WORD)
            if not hdr.busy:
                words.update(range(off + WORD, off + T_D + WORD, WORD))
    except HeapError:
        return None
    return words


def _write_lands(vm: Region, start: int, data: bytes) -> bool:
    """Would storing ``data`` at ``start`` change any metadata byte?"""
    meta = _metadata_bytes(vm)
    end = min(vm.arena.capacity, start + len(data))
    for pos in range(start, end):
        if meta is None or pos - pos % WORD in meta:
            if vm.arena.bytes[pos] != data[pos - start]:
                return True
    return False


class _Replayer:
    def __init__(self, vm: Region):
        self.vm = vm
        self.blocks: dict[str, int] = {}
        self.live: set[str] = set()
        self.landed = False

    def block(self, ev: TraceEvent) -> int:
        if ev.id not in self.blocks:
            raise ReplayError(f"{ev.op} of unknown block {ev.id!r}")
        return self.blocks[ev.id]

    def run(self, ev: TraceEvent, entry: dict) -> None:
        vm = self.vm
        if ev.op == "open":
            raise ReplayError("a trace may only open one region")
        if ev.op == "malloc":
            if ev.id in self.live:
                raise ReplayError(f"block {ev.id!r} is already allocated")
            # a failed allocation binds the id to null, as malloc would
            self.blocks[ev.id] = 0
            b = vm.vmalloc(ev.size)
            self.blocks[ev.id] = b
            self.live.add(ev.id)
            entry["offset"] = b
        elif ev.op in ("free", "double_free"):
            b = self.block(ev)
            if not b:
                entry["null"] = True
                return
            if ev.op == "double_free" and ev.id in self.live:
                self.live.discard(ev.id)
                vm.vmfree(b)
            self.live.discard(ev.id)
            vm.vmfree(b)
        elif ev.op == "resize":
            b = self.block(ev)
            nb = vm.vmresize(b, ev.size) if b else vm.vmalloc(ev.size)
            self.blocks[ev.id] = nb
            self.live.add(ev.id)
            entry["offset"] = nb
        elif ev.op == "clear":
            vm.vmclear()
            self.live.clear()
        elif ev.op == "flush":
            entry["drained"] = vm.flush_cache()
        elif ev.op == "overflow":
            if not self.block(ev):
                raise ReplayError(f"overflow into null block {ev.id!r}")
            start = self.blocks[ev.id] + ev.offset_in_block
            data = bytes([ev.fill_byte]) * ev.byte_count
            self.landed |= _write_lands(vm, start, data)
            entry["written"] = vm.arena.write_bytes(start, data)
        elif ev.op == "tamper_link":
            if not self.block(ev):
                raise ReplayError(f"tamper_link on null block {ev.id!r}")
            m = _CACHE_TARGET.match(ev.target)
            if m:
                slot = int(m.group(1))
                if slot < vm.cache_len and vm.free_cache[slot] != ev.raw_value:
                    self.landed = True
                vm.free_cache[slot] = ev.raw_value
            else:
                where = self.blocks[ev.id] - WORD + SLOTS[ev.target]
                data = ev.raw_value.to_bytes(WORD, "little")
                self.landed |= _write_lands(vm, where, data)
                vm.arena.write_bytes(where, data)
        elif ev.op == "stats":
            entry["stats"] = vm.region_stats().as_dict()


def replay(
    events: list[TraceEvent],
    seed: int = 0,
    codec: str = KEYED_MIX,
    hardened: bool = True,
) -> RunReport:
    """Run ``events`` against a fresh region and classify the outcome.

    The run stops at the first detected corruption.  Without a detection,
    the verdict is ``corruption_missed`` if an attack event changed live
    metadata, the allocator faulted, or the final audit finds damage.
    """
    if not events or events[0].op != "open":
        raise ReplayError("a trace must start with an open event")
    try:
        vm = vmopen(events[0].capacity, seed, codec, hardened)
    except CapacityInvalid as exc:
        raise ReplayError(f"open: {exc}") from None
    rep = _Replayer(vm)
    log = [{"index": 0, "op": "open", "outcome": "ok"}]
    detection = None
    faulted = False
    for index, ev in enumerate(events[1:], 1):
        entry: dict = {"index": index, "op": ev.op}
        if ev.id is not None:
            entry["id"] = ev.id
        log.append(entry)
        try:
            rep.run(ev, entry)
        except CorruptionDetected as exc:
            entry["outcome"] = exc.kind
            detection = {"index": index, "op": ev.op, "kind": exc.kind, "message": str(exc)}
            break
        except OutOfMemory:
            entry["outcome"] = "OutOfMemory"
            continue
        except HeapError as exc:
            entry["outcome"] = f"fault:{exc.kind}"
            faulted = True
            break
        entry["outcome"] = "ok"

    problems = [] if detection else vm.audit()
    if detection:
        verdict = DETECTED
    elif faulted or rep.landed or problems:
        verdict = MISSED
    else:
        verdict = CLEAN
    return RunReport(
        verdict=verdict,
        detection_event=detection,
        stats=vm.region_stats(),
        events=log,
        seed=seed,
        codec=codec,
        hardened=hardened,
        attack_landed=rep.landed,
        audit=problems,
        region=vm,
    )


def emit_report(report: RunReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.as_dict(), sort_keys=True, indent=2) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    mode = "hardened" if report.hardened else "unhardened"
    lines = [f"verdict: {report.verdict}  ({mode}, codec={report.codec}, seed={report.seed})"]
    if report.detection_event:
        d = report.detection_event
        lines.append(f"detected: {d['kind']} at event {d['index']} ({d['op']}): {d['message']}")
    for entry in report.events:
        extra = f" -> {entry['offset']:#x}" if "offset" in entry else ""
        who = f" {entry['id']}" if "id" in entry else ""
        lines.append(f"  [{entry['index']:3d}] {entry['op']}{who}: {entry.get('outcome', '-')}{extra}")
    for name, value in report.stats.as_dict().items():
        lines.append(f"  {name}: {value:.4f}" if isinstance(value, float) else f"  {name}: {value}")
    for problem in report.audit:
        lines.append(f"  audit: {problem}")
    return "\n".join(lines) + "\n"
