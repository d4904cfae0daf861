"""One test per acceptance criterion.  Run alone with

    pytest tests/test_acceptance.py

and read the "acceptance criteria" section at the end of the output.
"""

import json
import random
import time
from collections import Counter

import pytest

from heaplab.arena import HEADER_RESERVE, MIN_CHUNK, Arena, chunk_size_for
from heaplab.bench import rotation_bench
from heaplab.cli import main
from heaplab.corpus import double_free_trace, random_trace, three_block_trace, write_standard_corpus
from heaplab.errors import DoubleFree, LinkCorrupt, OutOfMemory
from heaplab.freetree import FreeTree, write_node
from heaplab.linkcodec import KEYED_MIX, MODEXP, OFFSET_LIMIT, LinkCodec, decode, derive_key, encode, modexp_key
from heaplab.region import vmopen
from heaplab.trace import CLEAN, DETECTED, TraceEvent, dump_trace, emit_report, parse_trace, replay

from oracles import linear_best_fit, square_and_multiply, walk_chunks

E = TraceEvent


# -- shared trace driver -----------------------------------------------------


class Checked:
    """Replays a trace event by event with oracle and invariant checks."""

    def __init__(self):
        self.fit_checks = 0
        self.fit_violations: list[str] = []
        self.invariant_checks = 0
        self.invariant_violations: list[str] = []
        self.flush_checks = 0
        self.clear_checks = 0
        self.events = 0

    def _invariants(self, vm, ev, where, flushed):
        self.invariant_checks += 1
        st = vm.region_stats()
        if st.free_bytes + st.busy_bytes != vm.usable:
            self.invariant_violations.append(f"{where}: conservation")
        try:
            chunks = walk_chunks(bytes(vm.arena.bytes))
        except AssertionError as exc:
            self.invariant_violations.append(f"{where}: tiling {exc}")
            return
        if sum(size for _, size, _ in chunks) != vm.usable:
            self.invariant_violations.append(f"{where}: tiling sum")
        if ev.op == "clear":
            self.clear_checks += 1
            if chunks != [(HEADER_RESERVE, vm.usable, False)]:
                self.invariant_violations.append(f"{where}: clear left {len(chunks)} chunks")
        if flushed:
            # a free that flushed has already parked itself in the fresh cache
            self.flush_checks += 1
            cached = set(vm.cached_chunks())
            for (o1, _, b1), (o2, _, b2) in zip(chunks, chunks[1:]):
                if not b1 and not b2 and o1 not in cached and o2 not in cached:
                    self.invariant_violations.append(f"{where}: adjacent free chunks after flush")

    def run(self, events, seed, name=""):
        vm = vmopen(events[0].capacity, seed)
        blocks: dict[str, int] = {}
        live: set[str] = set()
        detected = None
        for index, ev in enumerate(events[1:], 1):
            where = f"{name}#{index} {ev.op}"
            self.events += 1
            flushes = vm.cache_flushes
            try:
                if ev.op == "malloc":
                    need = chunk_size_for(ev.size)
                    want = linear_best_fit(vm, need)
                    if want is None and vm.cache_len:
                        # the allocator consolidates on a miss; do it first
                        # so the oracle sees the same free set
                        vm.flush_cache()
                        self._invariants(vm, E("flush"), where + " (pre-flush)", True)
                        flushes = vm.cache_flushes
                        want = linear_best_fit(vm, need)
                    blocks[ev.id] = 0
                    try:
                        blocks[ev.id] = vm.vmalloc(ev.size)
                    except OutOfMemory:
                        if want is not None:
                            self.fit_violations.append(f"{where}: OOM with {want} available")
                    else:
                        live.add(ev.id)
                        self.fit_checks += 1
                        if vm.last_fit != want:
                            self.fit_violations.append(f"{where}: chose {vm.last_fit}, oracle {want}")
                elif ev.op in ("free", "double_free"):
                    if blocks[ev.id]:
                        if ev.op == "double_free" and ev.id in live:
                            live.discard(ev.id)
                            vm.vmfree(blocks[ev.id])
                        live.discard(ev.id)
                        vm.vmfree(blocks[ev.id])
                elif ev.op == "resize":
                    if blocks[ev.id]:
                        try:
                            blocks[ev.id] = vm.vmresize(blocks[ev.id], ev.size)
                        except OutOfMemory:
                            pass
                elif ev.op == "flush":
                    vm.flush_cache()
                elif ev.op == "clear":
                    vm.vmclear()
                    live.clear()
            except DoubleFree:
                detected = index
            self._invariants(vm, ev, where, vm.cache_flushes > flushes)
            if detected:
                break
        return detected


# -- 1 -----------------------------------------------------------------------


@pytest.mark.criterion(1, "overflow trace detected (exit 2), exact fit clean (exit 0), < 1 s")
def test_criterion_1_three_block_trace(tmp_path, capsys, record_property):
    over = tmp_path / "overflow.jsonl"
    over.write_text(dump_trace(three_block_trace(120)))
    fits = tmp_path / "fits.jsonl"
    fits.write_text(dump_trace(three_block_trace(96)))
    free_a = [e.op for e in three_block_trace(120)].index("free")

    t0 = time.perf_counter()
    code = main(["replay", "--trace", str(over), "--seed", "1"])
    report = json.loads(capsys.readouterr().out)
    t1 = time.perf_counter()
    code_fit = main(["replay", "--trace", str(fits), "--seed", "1"])
    fit_report = json.loads(capsys.readouterr().out)
    t2 = time.perf_counter()

    record_property("detected_at", f"{report['detection_event']['op']}#{report['detection_event']['index']}")
    record_property("kind", report["detection_event"]["kind"])
    record_property("seconds", f"{max(t1 - t0, t2 - t1):.3f}")
    assert code == 2 and report["verdict"] == DETECTED
    assert report["detection_event"]["index"] <= free_a
    assert code_fit == 0 and fit_report["verdict"] == CLEAN
    assert t1 - t0 < 1.0 and t2 - t1 < 1.0


# -- 2 -----------------------------------------------------------------------


@pytest.mark.criterion(2, "splay tree vs sorted-multiset oracle, 10^4 sequences, < 30 s")
def test_criterion_2_tree_oracle(record_property):
    sequences, max_len = 10_000, 40
    mismatches: list[str] = []
    ops_run = 0
    t0 = time.perf_counter()
    for s in range(sequences):
        rng = random.Random(s)
        n_keys = rng.randint(1, 64)
        arena = Arena(HEADER_RESERVE + MIN_CHUNK * (max_len + 1))
        lc = LinkCodec(derive_key(s, KEYED_MIX if s % 4 else MODEXP), arena.capacity)
        tree = FreeTree(arena, lc)
        oracle: Counter = Counter()
        nodes: list[int] = []
        nxt = HEADER_RESERVE
        for step in range(rng.randint(1, max_len)):
            roll, k = rng.random(), rng.randint(1, n_keys)
            ops_run += 1
            if roll < 0.35:
                write_node(arena, lc, nxt, k)
                tree.insert(nxt)
                nodes.append(nxt)
                nxt += MIN_CHUNK
                oracle[k] += 1
                op = "insert"
            elif roll < 0.5 and nodes:
                node = nodes.pop(rng.randrange(len(nodes)))
                key = tree.key(node)
                tree.delete(node)
                oracle[key] -= 1
                op = "delete"
            elif roll < 0.65:
                got = tree.access(k)
                op = "access"
                if (got is not None) != (oracle[k] > 0) or (got and tree.key(got) != k):
                    mismatches.append(f"seq {s} step {step}: access({k})")
            elif roll < 0.8:
                got = tree.find_best_fit(k)
                fits = [key for key, c in oracle.items() if c and key >= k]
                op = "find_best_fit"
                if fits:
                    want = min(fits)
                    head = tree.access(want)
                    if got is None or tree.key(got) != want or got not in tree.chain(head):
                        mismatches.append(f"seq {s} step {step}: best fit for {k}")
                elif got is not None:
                    mismatches.append(f"seq {s} step {step}: best fit for {k} should miss")
            else:
                t1_, t2_ = tree.split(k)
                lo, hi = dict(t1_.items()), dict(t2_.items())
                if any(key > k for key in lo) or any(key <= k for key in hi):
                    mismatches.append(f"seq {s} step {step}: split({k}) order")
                if tree.root:
                    mismatches.append(f"seq {s} step {step}: split left input non-empty")
                tree = FreeTree.join(t1_, t2_)
                op = "split+join"
            want_items = sorted((key, c) for key, c in oracle.items() if c)
            if tree.items() != want_items:
                mismatches.append(f"seq {s} step {step}: {op} in-order/chain mismatch")
            if tree.chunk_count != sum(oracle.values()) or tree.count != len(want_items):
                mismatches.append(f"seq {s} step {step}: {op} counts")
    elapsed = time.perf_counter() - t0
    record_property("ops", ops_run)
    record_property("mismatches", len(mismatches))
    record_property("seconds", f"{elapsed:.1f}")
    assert mismatches == []
    assert elapsed < 30


# -- 3, 6, 7 -------------------------------------------------------------------


@pytest.fixture(scope="module")
def best_fit_run():
    checked = Checked()
    t0 = time.perf_counter()
    for s in range(1000):
        rng = random.Random(s)
        events = random_trace(rng, rng.randint(2, 500))
        checked.run(events, seed=s, name=f"trace{s}")
    checked.seconds = time.perf_counter() - t0
    return checked


@pytest.fixture(scope="module")
def double_free_run():
    rng = random.Random(6)
    traces = [double_free_trace(rng, rng.randint(5, 120)) for _ in range(1000)]
    verdicts = []
    for s, events in enumerate(traces):
        report = replay(events, seed=s)
        d = report.detection_event
        verdicts.append((report.verdict, d and d["kind"], d and d["index"] == len(events) - 1))
    checked = Checked()
    detected_by_driver = sum(checked.run(events, seed=s, name=f"df{s}") is not None for s, events in enumerate(traces))
    return verdicts, checked, detected_by_driver


@pytest.mark.criterion(3, "best fit equals linear-scan minimum over 10^3 traces, < 60 s")
def test_criterion_3_best_fit(best_fit_run, record_property):
    record_property("mallocs_checked", best_fit_run.fit_checks)
    record_property("violations", len(best_fit_run.fit_violations))
    record_property("seconds", f"{best_fit_run.seconds:.1f}")
    assert best_fit_run.fit_checks > 50_000
    assert best_fit_run.fit_violations == []
    assert best_fit_run.seconds < 60


@pytest.mark.criterion(6, "10^3 double-free traces detected as DoubleFree, 100%")
def test_criterion_6_double_free(double_free_run, record_property):
    verdicts, _, by_driver = double_free_run
    hits = sum(v == DETECTED and kind == "DoubleFree" and last for v, kind, last in verdicts)
    record_property("detected", f"{hits}/{len(verdicts)}")
    assert hits == len(verdicts) == 1000
    assert by_driver == 1000


@pytest.mark.criterion(7, "conservation, tiling, one chunk after clear, no adjacent free after flush")
def test_criterion_7_invariants(best_fit_run, double_free_run, record_property):
    _, df_checked, _ = double_free_run
    violations = best_fit_run.invariant_violations + df_checked.invariant_violations
    record_property("event_checks", best_fit_run.invariant_checks + df_checked.invariant_checks)
    record_property("flush_checks", best_fit_run.flush_checks + df_checked.flush_checks)
    record_property("clear_checks", best_fit_run.clear_checks)
    record_property("violations", len(violations))
    assert violations == []
    assert best_fit_run.flush_checks > 0 and best_fit_run.clear_checks > 0
    # an explicit clear on top of the fixture traces
    vm = vmopen(4096, 1)
    for _ in range(3):
        vm.vmalloc(100)
    vm.vmclear()
    assert walk_chunks(bytes(vm.arena.bytes)) == [(HEADER_RESERVE, vm.usable, False)]


# -- 4 -----------------------------------------------------------------------


@pytest.mark.criterion(4, "rotations / (m log2(n+1)) <= 3.0 for n=1024, m=10^5")
def test_criterion_4_rotation_bound(record_property):
    result = rotation_bench(1024, 100_000, seed=0)
    for pattern, row in result["patterns"].items():
        record_property(pattern, f"{row['constant']:.4f}")
        print(f"{pattern}: C = {row['constant']:.4f}")
    assert set(result["patterns"]) == {"uniform", "sequential"}
    assert all(row["constant"] <= 3.0 for row in result["patterns"].values())


# -- 5 -----------------------------------------------------------------------


@pytest.mark.criterion(5, "codec round trip 10^5, bit flip and raw-offset detection >= 99.9%, textbook modexp")
def test_criterion_5_codec(record_property):
    # textbook parameters first
    assert square_and_multiply(65, 17, 3233) == 2790
    assert square_and_multiply(2790, 2753, 3233) == 65
    tb = modexp_key(61, 53, e=17)
    assert tb.d == 2753
    assert encode(65 * 8, tb) & ((1 << 48) - 1) == square_and_multiply(520, 17, 3233)

    rng = random.Random(55)
    for codec in (KEYED_MIX, MODEXP):
        keys = [derive_key(s, codec) for s in range(64)]
        bad = 0
        for i in range(100_000):
            key = keys[i % 64]
            off = rng.randrange(1, OFFSET_LIMIT // 8) * 8
            bad += decode(encode(off, key), key) != off
        assert bad == 0, codec

        trials, caught = 100_000, 0
        for i in range(trials):
            key = keys[i % 64]
            word = encode(rng.randrange(1, 1 << 17) * 8, key) ^ (1 << rng.randrange(64))
            try:
                decode(word, key, limit=1 << 20)
            except LinkCorrupt:
                caught += 1
        flip_rate = caught / trials
        record_property(f"{codec}_bit_flip", f"{flip_rate:.5f}")
        assert flip_rate >= 0.999

        caught = trials = 0
        for seed in range(1000):
            key = derive_key(seed + 10_000, codec)
            for _ in range(100):
                trials += 1
                try:
                    decode(rng.randrange(1, 1 << 17) * 8, key, limit=1 << 20)
                except LinkCorrupt:
                    caught += 1
        raw_rate = caught / trials
        record_property(f"{codec}_raw_offset", f"{raw_rate:.5f}")
        assert raw_rate >= 0.999


# -- 8 -----------------------------------------------------------------------


@pytest.mark.criterion(8, "33 frees of non-adjacent blocks flush exactly once, at the 33rd")
def test_criterion_8_cache_flush(record_property):
    events = [E("open", capacity=1 << 16)]
    for i in range(33):
        events += [E("malloc", id=f"b{i}", size=40), E("malloc", id=f"pad{i}", size=40)]
    for i in range(33):
        events += [E("free", id=f"b{i}"), E("stats")]
    report = replay(events, seed=8)
    flushes = [e["stats"]["cache_flushes"] for e in report.events if e["op"] == "stats"]
    record_property("cache_flushes", report.stats.cache_flushes)
    assert report.verdict == CLEAN
    assert flushes == [0] * 32 + [1]
    assert report.stats.cache_flushes == 1


# -- 9 -----------------------------------------------------------------------


@pytest.mark.criterion(9, "repeated replays give byte-identical JSON reports")
def test_criterion_9_determinism(tmp_path, capsys, record_property):
    write_standard_corpus(tmp_path)
    rng = random.Random(9)
    traces = [parse_trace(p.read_text()) for p in sorted(tmp_path.glob("*.jsonl"))]
    traces += [random_trace(rng, 200) for _ in range(5)] + [double_free_trace(rng, 50) for _ in range(5)]
    compared = 0
    for events in traces:
        for seed in (0, 1, 12345):
            for codec in (KEYED_MIX, MODEXP):
                for hardened in (True, False):
                    a = emit_report(replay(events, seed, codec, hardened))
                    b = emit_report(replay(events, seed, codec, hardened))
                    assert a == b
                    compared += 1
    path = tmp_path / "overflow_three_block.jsonl"
    outs = []
    for _ in range(2):
        main(["replay", "--trace", str(path), "--seed", "3", "--codec", "modexp"])
        outs.append(capsys.readouterr().out.encode())
    assert outs[0] == outs[1]
    record_property("tuples_compared", compared)
