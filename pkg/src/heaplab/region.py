"""Vmalloc-style region: best-fit allocation over encoded free structures.

Free chunks live in one of four containers chosen by size:

==========  =========================  ==========================
size        structure                  notes
==========  =========================  ==========================
64          singly linked, uniform     LIFO
128         doubly linked, uniform     LIFO
<= 512      doubly linked, sorted      every other size up to 512
> 512       splay tree                 same-size chains per node
==========  =========================  ==========================

Freed chunks first land in a 32-slot deferred-free cache and are only
coalesced and filed when the cache is flushed (cache full, allocation miss,
vmclear, or an explicit flush).  Any detected corruption poisons the region:
every later mutating call raises RegionPoisoned.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

from .arena import (
    BUSY,
    HEADER_RESERVE,
    MIN_CHUNK,
    OVERHEAD,
    SIZE_MASK,
    WORD,
    Arena,
    chunk_size_for,
    create_arena,
)
from .errors import (
    ChunkCorrupt,
    CorruptionDetected,
    DoubleFree,
    HeapError,
    HeapFault,
    LinkCorrupt,
    NeighborCorrupt,
    NotPresent,
    OffsetInvalid,
    OutOfMemory,
    RegionPoisoned,
)
from .freetree import T_D, T_L, T_N, T_P, T_R, T_S, FreeTree, write_node
from .linkcodec import KEYED_MIX, LinkCodec, PlainCodec, derive_key

CACHE_SLOTS = 32
SIZE_A, SIZE_B, SIZE_C = 64, 128, 512

SINGLY_UNIFORM = "singly linked uniform"
DOUBLY_UNIFORM = "doubly linked uniform"
DOUBLY_SORTED = "doubly linked variable sorted"


class SizeClassTier:
    """An encoded free list threaded through the node records of its chunks.

    ``t_n`` is the forward link; doubly linked tiers also keep ``t_p``.
    """

    def __init__(self, structure: str, bound: int, arena: Arena, codec, exact: bool):
        self.structure = structure
        self.node_size_bound = bound
        self.exact = exact
        self.arena = arena
        self.codec = codec
        self._head = 0
        self._limit = arena.capacity // MIN_CHUNK + 2

    @property
    def head(self) -> int:
        return self.codec.decode(self._head)

    @head.setter
    def head(self, node: int) -> None:
        self._head = self.codec.encode(node)

    @property
    def doubly(self) -> bool:
        return self.structure != SINGLY_UNIFORM

    @property
    def sorted(self) -> bool:
        return self.structure == DOUBLY_SORTED

    def _get(self, node: int, slot: int) -> int:
        return self.codec.decode(self.arena.read_word(node + slot))

    def _set(self, node: int, slot: int, target: int) -> None:
        self.arena.write_word(node + slot, self.codec.encode(target))

    def size_of(self, node: int) -> int:
        return self.arena.read_word(node + T_S)

    def __iter__(self) -> Iterator[int]:
        node = self.head
        for _ in range(self._limit):
            if not node:
                return
            yield node
            node = self._get(node, T_N)
        raise HeapFault(f"{self.structure} list does not terminate")

    def push(self, node: int) -> None:
        size = self.size_of(node)
        prev, nxt = 0, self.head
        if self.sorted:
            for cur in self:
                if self.size_of(cur) >= size:
                    break
                prev = cur
            nxt = self._get(prev, T_N) if prev else self.head
        self._set(node, T_N, nxt)
        if self.doubly:
            self._set(node, T_P, prev)
            if nxt:
                self._set(nxt, T_P, node)
        if prev:
            self._set(prev, T_N, node)
        else:
            self.head = node

    def remove(self, node: int) -> None:
        if not self.doubly:
            prev = 0
            for cur in self:
                if cur == node:
                    nxt = self._get(node, T_N)
                    if prev:
                        self._set(prev, T_N, nxt)
                    else:
                        self.head = nxt
                    self._set(node, T_N, 0)
                    return
                prev = cur
            raise NotPresent(f"chunk {node:#x} not in {self.structure} list")

        prev = self._get(node, T_P)
        nxt = self._get(node, T_N)
        if self.codec.hardened:
            # classic safe-unlink: both neighbours must point back at node
            if prev and self._get(prev, T_N) != node:
                raise LinkCorrupt(f"prev link of {node:#x} does not point back")
            if not prev and self.head != node:
                raise NotPresent(f"chunk {node:#x} not in {self.structure} list")
            if nxt and self._get(nxt, T_P) != node:
                raise LinkCorrupt(f"next link of {node:#x} does not point back")
        if prev:
            self._set(prev, T_N, nxt)
        else:
            self.head = nxt
        if nxt:
            self._set(nxt, T_P, prev)
        self._set(node, T_N, 0)
        self._set(node, T_P, 0)

    def first_fit(self, need: int) -> Optional[int]:
        if self.exact:
            head = self.head
            return head if head and self.node_size_bound >= need else None
        for node in self:
            if self.size_of(node) >= need:
                return node
        return None


@dataclass
class RegionStats:
    allocs: int
    frees: int
    cache_flushes: int
    detected_corruptions: int
    rotation_count: int
    fragmentation: float
    free_bytes: int
    busy_bytes: int

    def as_dict(self) -> dict:
        return asdict(self)


class Region:
    """Allocator state for one arena.  Not thread safe."""

    def __init__(self, capacity: int, key_seed: int = 0, codec: str = KEYED_MIX, hardened: bool = True):
        self.key = derive_key(key_seed, codec)
        self.codec_id = codec
        self.hardened = hardened
        self.arena = create_arena(capacity, self.key.guard_key)
        self.codec = (LinkCodec if hardened else PlainCodec)(self.key, capacity)
        self.tree = FreeTree(self.arena, self.codec)
        self.tiers = [
            SizeClassTier(SINGLY_UNIFORM, SIZE_A, self.arena, self.codec, exact=True),
            SizeClassTier(DOUBLY_UNIFORM, SIZE_B, self.arena, self.codec, exact=True),
            SizeClassTier(DOUBLY_SORTED, SIZE_C, self.arena, self.codec, exact=False),
        ]
        self.free_cache = [0] * CACHE_SLOTS
        self.cache_len = 0
        self.poisoned = False
        self.allocs = self.frees = self.cache_flushes = self.detected_corruptions = 0
        self.busy_bytes = 0
        self.last_fit: Optional[int] = None
        self._free_sizes: Counter[int] = Counter()
        self._store(HEADER_RESERVE)

    @property
    def gkey(self) -> int:
        return self.key.guard_key

    @property
    def usable(self) -> int:
        return self.arena.usable

    # -- poisoning ---------------------------------------------------------

    @contextmanager
    def _mutation(self):
        if self.poisoned:
            raise RegionPoisoned("region refused the call after detected corruption")
        try:
            yield
        except CorruptionDetected:
            self.poisoned = True
            self.detected_corruptions += 1
            raise

    # -- containers --------------------------------------------------------

    def _container(self, size: int):
        if size == SIZE_A:
            return self.tiers[0]
        if size == SIZE_B:
            return self.tiers[1]
        if size <= SIZE_C:
            return self.tiers[2]
        return self.tree

    def _store(self, off: int) -> None:
        """File a free chunk (header already written) in its container."""
        size = self.arena.read_word(off) & SIZE_MASK
        write_node(self.arena, self.codec, off, size)
        box = self._container(size)
        if box is self.tree:
            self.tree.insert(off)
        else:
            box.push(off)
        self._free_sizes[size] += 1

    def _unstore(self, off: int) -> None:
        size = self.arena.read_word(off) & SIZE_MASK
        box = self._container(size)
        try:
            if box is self.tree:
                self.tree.delete(off)
            else:
                box.remove(off)
        except NotPresent as exc:
            if self.hardened:
                raise NeighborCorrupt(f"free chunk {off:#x} is not in any free structure") from exc
            raise HeapFault(str(exc)) from exc
        self._uncount(size)

    def _uncount(self, size: int) -> None:
        self._free_sizes[size] -= 1
        if self._free_sizes[size] <= 0:
            del self._free_sizes[size]

    def _check_free_node(self, off: int, in_cache: bool) -> int:
        """Integrity gate for a free chunk about to be used; returns its size."""
        word = self.arena.read_word(off)
        size = word & SIZE_MASK
        if not self.hardened:
            return size
        if word & BUSY or not self.arena.verify_chunk(off, self.gkey):
            raise ChunkCorrupt(f"free chunk at {off:#x} fails verification")
        if self.arena.read_word(off + T_S) != size:
            raise LinkCorrupt(f"size field of node {off:#x} disagrees with its header")
        if self.codec.decode(self.arena.read_word(off + T_D)) != off:
            raise LinkCorrupt(f"self link of node {off:#x} does not match")
        if in_cache:
            for slot in (T_P, T_L, T_R, T_N):
                if self.codec.decode(self.arena.read_word(off + slot)):
                    raise LinkCorrupt(f"cached chunk {off:#x} carries a live link")
        return size

    def structure_chunks(self) -> list[int]:
        """Every chunk filed in a tier or the tree (not the cache)."""
        out: list[int] = []
        for tier in self.tiers:
            out.extend(tier)
        out.extend(self.tree.nodes())
        return out

    # -- deferred-free cache ----------------------------------------------

    def cached_chunks(self) -> list[int]:
        return [self.codec.decode(w) for w in self.free_cache[: self.cache_len]]

    def _cache_push(self, off: int) -> None:
        self.free_cache[self.cache_len] = self.codec.encode(off)
        self.cache_len += 1

    def _cache_drop(self, off: int) -> None:
        words = [w for w in self.free_cache[: self.cache_len] if self.codec.decode(w) != off]
        self.cache_len = len(words)
        self.free_cache = words + [0] * (CACHE_SLOTS - len(words))

    def _flush(self) -> int:
        pending = self.cached_chunks()
        if len(set(pending)) != len(pending):
            raise DoubleFree("the deferred-free cache holds the same chunk twice")
        if not pending:
            return 0
        waiting = set(pending)

        def absorb(nb: int) -> None:
            if nb in waiting:
                waiting.discard(nb)
                self._uncount(self._check_free_node(nb, in_cache=True))
            else:
                if self.hardened:
                    self._check_free_node(nb, in_cache=False)
                self._unstore(nb)

        for off in pending:
            if off not in waiting:
                continue
            waiting.discard(off)
            self._uncount(self._check_free_node(off, in_cache=True))
            try:
                # a neighbour absorbed from the cache may itself border a
                # filed free chunk, so repeat until the span stops growing
                merged, span = off, -1
                while span != self.arena.read_word(merged) & SIZE_MASK:
                    span = self.arena.read_word(merged) & SIZE_MASK
                    merged = self.arena.coalesce_neighbors(merged, self.gkey, absorb, verify=self.hardened)
            except OffsetInvalid as exc:
                if self.hardened:
                    raise NeighborCorrupt(str(exc)) from exc
                raise
            self._store(merged)
        self.free_cache = [0] * CACHE_SLOTS
        self.cache_len = 0
        self.cache_flushes += 1
        return len(pending)

    def flush_cache(self) -> int:
        """Coalesce and file every cached chunk; returns how many were drained."""
        with self._mutation():
            return self._flush()

    # -- allocation --------------------------------------------------------

    def _select(self, need: int) -> Optional[tuple[int, int]]:
        best: Optional[tuple[int, int]] = None
        for tier in self.tiers:
            if not tier.exact and best is not None and best[1] == need:
                break
            if tier.exact and tier.node_size_bound < need:
                continue
            node = tier.first_fit(need)
            if node:
                size = tier.size_of(node)
                if best is None or size < best[1]:
                    best = (node, size)
        if best is None or best[1] > need:
            node = self.tree.find_best_fit(need)
            if node:
                size = self.tree.key(node)
                if best is None or size < best[1]:
                    best = (node, size)
        return best

    def _check_user_chunk(self, b: int) -> tuple[int, int]:
        """Validate a payload offset handed back by the caller."""
        off = b - WORD
        self.arena.check_offset(off)
        if off in self.cached_chunks():
            raise DoubleFree(f"block {b:#x} is already in the deferred-free cache")
        word = self.arena.read_word(off)
        if not word & BUSY:
            raise DoubleFree(f"block {b:#x} is not busy")
        if self.hardened and not self.arena.verify_chunk(off, self.gkey):
            raise ChunkCorrupt(f"block {b:#x} has a damaged header or footer")
        return off, word & SIZE_MASK

    def _malloc(self, size: int) -> int:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        need = chunk_size_for(size)
        if need > self.usable:
            raise OutOfMemory(f"{size} bytes can never fit this arena")
        found = self._select(need)
        if found is None and self.cache_len:
            self._flush()
            found = self._select(need)
        if found is None:
            raise OutOfMemory(f"no free chunk of {need} bytes")
        off, fit = found
        self._check_free_node(off, in_cache=False)
        self._unstore(off)
        self.last_fit = fit
        off, rest = self.arena.split_chunk(off, need, self.gkey)
        used = need if rest else fit
        self.arena.write_chunk(off, used, True, self.gkey)
        if rest:
            self._release(rest)
        self.allocs += 1
        self.busy_bytes += used
        return off + WORD

    def _release(self, off: int) -> None:
        """File a split-off remainder, merging a filed free right neighbour."""
        size = self.arena.read_word(off) & SIZE_MASK
        nxt = off + size
        if nxt < self.arena.capacity and not self.arena.read_word(nxt) & BUSY:
            if nxt not in self.cached_chunks():
                nsize = self._check_free_node(nxt, in_cache=False)
                self._unstore(nxt)
                self.arena.write_chunk(off, size + nsize, False, self.gkey)
        self._store(off)

    def _free(self, b: int) -> None:
        off, size = self._check_user_chunk(b)
        if self.cache_len == CACHE_SLOTS:
            self._flush()
        self.arena.write_chunk(off, size, False, self.gkey)
        write_node(self.arena, self.codec, off, size)
        self._cache_push(off)
        self._free_sizes[size] += 1
        self.frees += 1
        self.busy_bytes -= size

    def vmalloc(self, size: int) -> int:
        """Allocate ``size`` bytes; returns the payload offset."""
        with self._mutation():
            return self._malloc(size)

    def vmfree(self, b: int) -> None:
        with self._mutation():
            self._free(b)

    def vmresize(self, b: int, size: int) -> int:
        """Resize block ``b``, in place when possible; returns the payload offset."""
        with self._mutation():
            if size <= 0:
                raise ValueError("resize size must be positive")
            off, cur = self._check_user_chunk(b)
            need = chunk_size_for(size)
            if need <= cur:
                if cur - need >= MIN_CHUNK:
                    self.arena.write_chunk(off, need, True, self.gkey)
                    self.arena.write_chunk(off + need, cur - need, False, self.gkey)
                    self.busy_bytes -= cur - need
                    self._release(off + need)
                return b

            nxt = off + cur
            if nxt < self.arena.capacity:
                word = self.arena.read_word(nxt)
                nsize = word & SIZE_MASK
                if not word & BUSY and cur + nsize >= need:
                    if nxt in self.cached_chunks():
                        self._check_free_node(nxt, in_cache=True)
                        self._cache_drop(nxt)
                        self._uncount(nsize)
                    else:
                        self._check_free_node(nxt, in_cache=False)
                        self._unstore(nxt)
                    total = cur + nsize
                    used = need if total - need >= MIN_CHUNK else total
                    self.arena.write_chunk(off, used, True, self.gkey)
                    if used < total:
                        self.arena.write_chunk(off + used, total - used, False, self.gkey)
                        self._release(off + used)
                    self.busy_bytes += used - cur
                    return b

            new_b = self._malloc(size)
            keep = min(cur, chunk_size_for(size)) - OVERHEAD
            data = bytes(self.arena.bytes[b : b + keep])
            self.arena.bytes[new_b : new_b + keep] = data
            self._free(b)
            return new_b

    def vmclear(self) -> None:
        """Free every busy block and collapse the arena to one free chunk."""
        with self._mutation():
            self.cached_chunks()
            try:
                walk = list(self.arena.chunks())
            except HeapFault as exc:
                if self.hardened:
                    raise ChunkCorrupt(f"chunk walk broken: {exc}") from exc
                raise
            if self.hardened:
                for off, _ in walk:
                    if not self.arena.verify_chunk(off, self.gkey):
                        raise ChunkCorrupt(f"chunk at {off:#x} fails verification during clear")
            for off, hdr in walk:
                if hdr.busy:
                    self.arena.write_chunk(off, hdr.size, False, self.gkey)
            for tier in self.tiers:
                tier.head = 0
            self.tree.root = 0
            self.tree.count = self.tree.chunk_count = 0
            self.free_cache = [0] * CACHE_SLOTS
            self.cache_len = 0
            self._free_sizes.clear()
            self.busy_bytes = 0
            self.arena.write_chunk(HEADER_RESERVE, self.usable, False, self.gkey)
            self._store(HEADER_RESERVE)

    # -- inspection --------------------------------------------------------

    def region_stats(self) -> RegionStats:
        free_bytes = self.usable - self.busy_bytes
        largest = max(self._free_sizes) if self._free_sizes else 0
        frag = 1.0 - largest / free_bytes if free_bytes > 0 else 0.0
        return RegionStats(
            allocs=self.allocs,
            frees=self.frees,
            cache_flushes=self.cache_flushes,
            detected_corruptions=self.detected_corruptions,
            rotation_count=self.tree.rotation_count,
            fragmentation=frag,
            free_bytes=free_bytes,
            busy_bytes=self.busy_bytes,
        )

    stats = region_stats

    def audit(self) -> list[str]:
        """Structural self-check; an empty list means the heap is consistent.

        Read only, and safe on damaged heaps: failures become messages.
        """
        problems: list[str] = []
        try:
            walk = list(self.arena.chunks())
        except (HeapFault, OffsetInvalid) as exc:
            return [f"tiling broken: {exc}"]
        busy = 0
        free_chunks = set()
        for off, hdr in walk:
            if not self.arena.verify_chunk(off, self.gkey):
                problems.append(f"chunk {off:#x} fails verification")
            if hdr.busy:
                busy += hdr.size
            else:
                free_chunks.add(off)
        if busy != self.busy_bytes:
            problems.append(f"busy bytes {busy} != accounted {self.busy_bytes}")
        try:
            cached = self.cached_chunks()
            filed = self.structure_chunks()
            self.tree.validate()
        except HeapError as exc:
            problems.append(f"free structures unreadable: {exc.kind}: {exc}")
            return problems
        listed = cached + filed
        if len(set(listed)) != len(listed):
            problems.append("a chunk is listed twice in the free structures")
        if set(listed) != free_chunks:
            problems.append("free structures disagree with the chunk walk")
        for off in filed:
            size = self.arena.read_word(off) & SIZE_MASK
            if self.arena.read_word(off + T_S) != size:
                problems.append(f"node {off:#x} key disagrees with its header")
        return problems

    def free_runs_adjacent(self) -> bool:
        """True if two physically adjacent chunks are both free."""
        prev_free = False
        for _, hdr in self.arena.chunks():
            if prev_free and not hdr.busy:
                return True
            prev_free = not hdr.busy
        return False


def vmopen(capacity: int, key_seed: int = 0, codec: str = KEYED_MIX, hardened: bool = True) -> Region:
    return Region(capacity, key_seed, codec, hardened)
