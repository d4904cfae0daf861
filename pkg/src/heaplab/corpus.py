"""Trace generators and the attack-corpus runner."""

from __future__ import annotations

import random
from collections import defaultdict
from pathlib import Path
from typing import Optional

from .errors import ParseError, ReplayError
from .linkcodec import KEYED_MIX
from .trace import CLEAN, DETECTED, MISSED, TraceEvent, dump_trace, parse_trace, replay

E = TraceEvent


def three_block_trace(overflow: Optional[int] = 120, capacity: int = 4096) -> list[TraceEvent]:
    """The 96/80/80 example: three mallocs, a strcpy into ``a``, three frees.

    ``overflow=None`` drops the strcpy; otherwise it writes that many bytes.
    """
    events = [
        E("open", capacity=capacity),
        E("malloc", id="a", size=96),
        E("malloc", id="b", size=80),
        E("malloc", id="c", size=80),
    ]
    if overflow is not None:
        events.append(E("overflow", id="a", offset_in_block=0, byte_count=overflow, fill_byte=65))
    events += [E("free", id="a"), E("free", id="b"), E("free", id="c")]
    return events


def _request_size(rng: random.Random) -> int:
    roll = rng.random()
    if roll < 0.45:
        return rng.randint(1, 120)
    if roll < 0.8:
        return rng.randint(121, 500)
    return rng.randint(501, 1500)


def random_trace(rng: random.Random, length: int, capacity: int = 16384, clears: bool = True) -> list[TraceEvent]:
    """Attack-free allocation traffic: malloc, free, resize, flush, clear."""
    events = [E("open", capacity=capacity)]
    live: list[str] = []
    serial = 0
    while len(events) < length:
        roll = rng.random()
        if roll < 0.45 or not live:
            serial += 1
            name = f"m{serial}"
            events.append(E("malloc", id=name, size=_request_size(rng)))
            live.append(name)
        elif roll < 0.82:
            events.append(E("free", id=live.pop(rng.randrange(len(live)))))
        elif roll < 0.92:
            events.append(E("resize", id=rng.choice(live), size=_request_size(rng)))
        elif roll < 0.97:
            events.append(E("flush"))
        elif roll < 0.985 and clears:
            events.append(E("clear"))
            live.clear()
        else:
            events.append(E("stats"))
    return events


def double_free_trace(rng: random.Random, length: int, capacity: int = 16384) -> list[TraceEvent]:
    """Random traffic ending in one double free of a block not yet reused.

    The victim is allocated first so that allocation cannot fail.  Between
    its legitimate free and the repeat only frees and flushes occur, so the
    chunk cannot have been handed out again.
    """
    victim = "victim"
    head = [E("open", capacity=capacity), E("malloc", id=victim, size=_request_size(rng))]
    prefix = max(1, length - rng.randint(3, 12))
    events = head + random_trace(rng, prefix, capacity, clears=False)[1:]
    live = _live_after(events)
    live.remove(victim)
    if rng.random() < 0.25:
        events.append(E("double_free", id=victim))
        return events
    events.append(E("free", id=victim))
    while len(events) < length - 1:
        if live and rng.random() < 0.7:
            events.append(E("free", id=live.pop(rng.randrange(len(live)))))
        else:
            events.append(E("flush"))
    events.append(E("double_free", id=victim))
    return events


def _live_after(events: list[TraceEvent]) -> list[str]:
    live: list[str] = []
    for ev in events:
        if ev.op == "malloc":
            live.append(ev.id)
        elif ev.op == "free":
            live.remove(ev.id)
        elif ev.op == "clear":
            live.clear()
    return live


def link_tamper_trace(target: str, raw_value: int = 64, capacity: int = 4096) -> list[TraceEvent]:
    """Free a block, overwrite one of its metadata slots, then consolidate."""
    events = [
        E("open", capacity=capacity),
        E("malloc", id="a", size=200),
        E("malloc", id="b", size=40),
        E("malloc", id="c", size=200),
        E("malloc", id="d", size=40),
        E("free", id="a"),
        E("free", id="c"),
    ]
    events.append(E("tamper_link", id="a", target=target, raw_value=raw_value))
    events += [E("free", id="b"), E("flush"), E("malloc", id="e", size=300)]
    return events


def write_standard_corpus(directory: Path) -> list[Path]:
    """Write the bundled attack corpus, one .jsonl per trace."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    traces = {
        "clean_three_block": three_block_trace(None),
        "clean_exact_fit": three_block_trace(96),
        "overflow_three_block": three_block_trace(120),
        "overflow_into_next_payload": three_block_trace(200),
        "double_free_adjacent": [
            E("open", capacity=4096),
            E("malloc", id="a", size=96),
            E("malloc", id="b", size=80),
            E("free", id="b"),
            E("double_free", id="b"),
        ],
        "double_free_after_flush": [
            E("open", capacity=4096),
            E("malloc", id="a", size=96),
            E("malloc", id="b", size=80),
            E("malloc", id="c", size=80),
            E("free", id="b"),
            E("free", id="a"),
            E("flush"),
            E("double_free", id="b"),
        ],
        "double_free_after_clear": [
            E("open", capacity=4096),
            E("malloc", id="a", size=600),
            E("malloc", id="b", size=80),
            E("clear"),
            E("double_free", id="b"),
        ],
    }
    for slot in ("t_p", "t_l", "t_r", "t_n", "t_d"):
        traces[f"link_overwrite_{slot}"] = link_tamper_trace(slot, raw_value=64)
    traces["link_overwrite_cache0"] = link_tamper_trace("cache[0]", raw_value=0x48)
    rng = random.Random(2024)
    for i in range(3):
        traces[f"clean_random_{i}"] = random_trace(rng, 120)
    written = []
    for name, events in traces.items():
        path = directory / f"{name}.jsonl"
        path.write_text(dump_trace(events))
        written.append(path)
    return written


def classify(events: list[TraceEvent]) -> str:
    """Attack class of a trace; writes within the requested size are not attacks."""
    ops = {ev.op for ev in events}
    if "double_free" in ops:
        return "double_free"
    if "tamper_link" in ops:
        return "link_overwrite"
    requested: dict[str, int] = {}
    for ev in events:
        if ev.op in ("malloc", "resize"):
            requested[ev.id] = ev.size
        elif ev.op == "overflow" and ev.offset_in_block + ev.byte_count > requested.get(ev.id, 0):
            return "overflow"
    return "clean"


def _tally() -> dict:
    return {DETECTED: 0, MISSED: 0, CLEAN: 0, "kinds": defaultdict(int)}


def run_attack_corpus(directory, seeds: int, base_seed: int = 0, codec: str = KEYED_MIX) -> dict:
    """Replay every trace under ``seeds`` keys, hardened and unhardened."""
    paths = sorted(Path(directory).glob("*.jsonl"))
    if not paths:
        raise FileNotFoundError(f"no .jsonl traces in {directory}")
    classes: dict[str, dict] = {}
    rows = []
    dominance_violations = 0
    for path in paths:
        try:
            events = parse_trace(path.read_text())
        except ParseError as exc:
            raise type(exc)(exc.message, exc.line, exc.column, source=path.name) from None
        cls = classify(events)
        entry = classes.setdefault(cls, {"traces": 0, "hardened": _tally(), "unhardened": _tally()})
        entry["traces"] += 1
        per_trace = {"trace": path.name, "class": cls, "hardened": 0, "unhardened": 0}
        for seed in range(base_seed, base_seed + seeds):
            verdicts = {}
            for mode, hardened in (("hardened", True), ("unhardened", False)):
                try:
                    report = replay(events, seed, codec, hardened)
                except ReplayError as exc:
                    raise ReplayError(f"{path.name}: {exc}") from None
                tally = entry[mode]
                tally[report.verdict] += 1
                if report.detection_event:
                    tally["kinds"][report.detection_event["kind"]] += 1
                    per_trace[mode] += 1
                verdicts[mode] = report.verdict
            if verdicts["unhardened"] == DETECTED and verdicts["hardened"] != DETECTED:
                dominance_violations += 1
        rows.append(per_trace)

    summary = {"seeds": seeds, "codec": codec, "classes": {}, "traces": rows,
               "dominance_violations": dominance_violations}
    for cls, entry in sorted(classes.items()):
        trials = entry["traces"] * seeds
        out = {"traces": entry["traces"], "trials": trials}
        for mode in ("hardened", "unhardened"):
            t = entry[mode]
            out[mode] = {
                "detected": t[DETECTED],
                "missed": t[MISSED],
                "clean": t[CLEAN],
                "detection_rate": t[DETECTED] / trials,
                "kinds": dict(sorted(t["kinds"].items())),
            }
        out["differential"] = out["hardened"]["detection_rate"] - out["unhardened"]["detection_rate"]
        summary["classes"][cls] = out
    return summary


def format_summary(summary: dict) -> str:
    head = f"{'class':<16}{'traces':>7}{'trials':>8}{'hardened':>10}{'unhardened':>12}{'diff':>8}"
    lines = [head, "-" * len(head)]
    for cls, row in summary["classes"].items():
        lines.append(
            f"{cls:<16}{row['traces']:>7}{row['trials']:>8}"
            f"{row['hardened']['detection_rate']:>10.1%}{row['unhardened']['detection_rate']:>12.1%}"
            f"{row['differential']:>+8.1%}"
        )
    lines.append(f"dominance violations: {summary['dominance_violations']}")
    return "\n".join(lines) + "\n"
