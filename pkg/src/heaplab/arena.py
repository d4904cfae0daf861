"""Simulated heap storage and chunk layout.

A chunk at offset ``off`` occupies ``[off, off + size)``::

    off           header word   size | busy bit, guard in bits 48..63
    off + 8       payload       (free chunks keep their tree record here)
    off+size-8    footer word   copy of the header word (boundary tag)

Offsets below ``HEADER_RESERVE`` are never chunks, so 0 can serve as the
null link.  The guard is a 16-bit keyed hash of (offset, size); without the
key a forged header is rejected with probability 1 - 2**-16.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

from .errors import CapacityInvalid, ChunkBusy, HeapFault, NeighborCorrupt, OffsetInvalid
from .linkcodec import MASK64, hash16, mix64

WORD = 8
HEADER_RESERVE = 8
MIN_ARENA = 256
MIN_CHUNK = 64
OVERHEAD = 2 * WORD
MAX_SIZE = 1 << 40

BUSY = 1
SIZE_MASK = (1 << 48) - 8
GUARD_SHIFT = 48

_WORD_FMT = struct.Struct("<Q")


def guard(off: int, size: int, key: int) -> int:
    return hash16(mix64(off ^ key), size)


def header_word(off: int, size: int, busy: bool, key: int) -> int:
    return (guard(off, size, key) << GUARD_SHIFT) | size | (BUSY if busy else 0)


def round_up(n: int) -> int:
    return (n + WORD - 1) & ~(WORD - 1)


def chunk_size_for(request: int) -> int:
    """Chunk size (header and footer included) that serves ``request`` bytes."""
    return max(MIN_CHUNK, round_up(request) + OVERHEAD)


@dataclass(frozen=True)
class ChunkHeader:
    size: int
    busy: bool
    guard: int
    word: int

    @classmethod
    def unpack(cls, word: int) -> "ChunkHeader":
        return cls(word & SIZE_MASK, bool(word & BUSY), word >> GUARD_SHIFT, word)


class Arena:
    """Fixed-capacity byte region addressed by 8-aligned offsets."""

    def __init__(self, capacity: int):
        if capacity < MIN_ARENA or capacity % WORD or capacity >= MAX_SIZE:
            raise CapacityInvalid(f"capacity {capacity} must be >= {MIN_ARENA} and 8-aligned")
        self.capacity = capacity
        self.word_size = WORD
        self.bytes = bytearray(capacity)

    @property
    def first(self) -> int:
        return HEADER_RESERVE

    @property
    def usable(self) -> int:
        return self.capacity - HEADER_RESERVE

    # -- raw words ---------------------------------------------------------

    def read_word(self, off: int) -> int:
        if off < 0 or off & 7 or off + WORD > self.capacity:
            raise OffsetInvalid(f"word offset {off:#x} outside arena")
        return _WORD_FMT.unpack_from(self.bytes, off)[0]

    def write_word(self, off: int, value: int) -> None:
        if off < 0 or off & 7 or off + WORD > self.capacity:
            raise OffsetInvalid(f"word offset {off:#x} outside arena")
        _WORD_FMT.pack_into(self.bytes, off, value & MASK64)

    def write_bytes(self, off: int, data: bytes) -> int:
        """Unchecked store; clipped at the arena end.  Returns bytes written."""
        end = min(self.capacity, off + len(data))
        if off < 0 or off >= end:
            return 0
        self.bytes[off:end] = data[: end - off]
        return end - off

    # -- chunk headers -----------------------------------------------------

    def check_offset(self, off: int) -> None:
        if off < HEADER_RESERVE or off & 7 or off + MIN_CHUNK > self.capacity:
            raise OffsetInvalid(f"chunk offset {off:#x} invalid")

    def read_header(self, off: int) -> ChunkHeader:
        self.check_offset(off)
        return ChunkHeader.unpack(self.read_word(off))

    def footer_offset(self, off: int, size: int) -> int:
        return off + size - WORD

    def write_chunk(self, off: int, size: int, busy: bool, key: int) -> None:
        """Write matching header and footer words for a chunk."""
        self.check_offset(off)
        if size < MIN_CHUNK or size & 7 or off + size > self.capacity:
            raise OffsetInvalid(f"chunk [{off:#x}, +{size}) does not fit")
        word = header_word(off, size, busy, key)
        self.write_word(off, word)
        self.write_word(off + size - WORD, word)

    def verify_chunk(self, off: int, key: int) -> bool:
        """Header/footer mirror plus guard check.  Never raises for bad data."""
        try:
            word = self.read_header(off).word
        except OffsetInvalid:
            return False
        size = word & SIZE_MASK
        if size < MIN_CHUNK or off + size > self.capacity:
            return False
        if self.read_word(off + size - WORD) != word:
            return False
        return word >> GUARD_SHIFT == guard(off, size, key)

    def chunks(self, limit: Optional[int] = None) -> Iterator[tuple[int, ChunkHeader]]:
        """Walk the tiling from the first chunk.

        Raises HeapFault if a size word would step outside the arena.
        """
        off = HEADER_RESERVE
        steps = 0
        limit = limit if limit is not None else self.capacity // MIN_CHUNK + 1
        while off < self.capacity:
            if steps > limit:
                raise HeapFault("chunk walk does not terminate")
            hdr = ChunkHeader.unpack(self.read_word(off))
            if hdr.size < MIN_CHUNK or off + hdr.size > self.capacity:
                raise HeapFault(f"chunk at {off:#x} has impossible size {hdr.size:#x}")
            yield off, hdr
            off += hdr.size
            steps += 1

    # -- splitting and coalescing -----------------------------------------

    def split_chunk(self, off: int, need: int, key: int) -> tuple[int, Optional[int]]:
        hdr = self.read_header(off)
        if hdr.busy:
            raise ChunkBusy(f"chunk at {off:#x} is busy")
        if need < MIN_CHUNK or need & 7 or need > hdr.size:
            raise ValueError(f"cannot split {hdr.size} bytes to {need}")
        rest = hdr.size - need
        if rest < MIN_CHUNK:
            return off, None
        self.write_chunk(off, need, False, key)
        self.write_chunk(off + need, rest, False, key)
        return off, off + need

    def free_neighbors(self, off: int, size: int, verify: bool, key: int) -> list[int]:
        """Offsets of the free physical neighbors of ``[off, off + size)``.

        The previous chunk is found through the footer word just below
        ``off``; with ``verify`` each neighbor must pass verify_chunk.
        """
        found = []
        nxt = off + size
        if nxt < self.capacity:
            if not self.read_word(nxt) & BUSY:
                found.append(nxt)
        if off > HEADER_RESERVE:
            tag = self.read_word(off - WORD)
            if not tag & BUSY:
                prev = off - (tag & SIZE_MASK)
                if prev == off or prev < HEADER_RESERVE:
                    if verify:
                        raise NeighborCorrupt(f"footer below {off:#x} holds impossible size")
                    raise HeapFault(f"footer below {off:#x} holds impossible size")
                found.append(prev)
        if verify:
            for nb in found:
                if not self.verify_chunk(nb, key):
                    raise NeighborCorrupt(f"neighbor at {nb:#x} of chunk {off:#x} fails verification")
                if nb < off and nb + (self.read_word(nb) & SIZE_MASK) != off:
                    raise NeighborCorrupt(f"neighbor at {nb:#x} does not end at {off:#x}")
        return found

    def coalesce_neighbors(
        self,
        off: int,
        key: int,
        absorb: Optional[Callable[[int], None]] = None,
        verify: bool = True,
    ) -> int:
        """Merge the free chunk at ``off`` with its free physical neighbors.

        ``absorb(neighbor)`` is called for each neighbor before the merge is
        written, so the caller can pull it out of whatever structure holds it.
        Both neighbors are checked before anything is absorbed.
        """
        hdr = self.read_header(off)
        if hdr.busy:
            raise ChunkBusy(f"chunk at {off:#x} is busy")
        neighbors = self.free_neighbors(off, hdr.size, verify, key)
        start, size = off, hdr.size
        for nb in neighbors:
            nb_size = self.read_word(nb) & SIZE_MASK
            if absorb:
                absorb(nb)
            start = min(start, nb)
            size += nb_size
        if start + size > self.capacity:
            raise HeapFault(f"merged chunk at {start:#x} overruns the arena")
        if neighbors:
            self.write_chunk(start, size, False, key)
        return start


def create_arena(capacity: int, key: int = 0) -> Arena:
    arena = Arena(capacity)
    arena.write_chunk(HEADER_RESERVE, arena.usable, False, key)
    return arena
