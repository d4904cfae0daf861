"""Best-fit heap allocator over an encoded splay tree, with an attack-trace harness."""

from .arena import Arena, ChunkHeader, create_arena
from .errors import (
    CapacityInvalid,
    ChunkCorrupt,
    CorruptionDetected,
    DoubleFree,
    HeapError,
    LinkCorrupt,
    NeighborCorrupt,
    OutOfMemory,
    RegionPoisoned,
)
from .freetree import FreeTree
from .linkcodec import KEYED_MIX, MODEXP, CodecKey, decode, derive_key, encode
from .region import Region, RegionStats, vmopen
from .trace import RunReport, TraceEvent, emit_report, parse_trace, replay

__all__ = [
    "Arena", "ChunkHeader", "create_arena", "FreeTree", "Region", "RegionStats", "vmopen",
    "CodecKey", "derive_key", "encode", "decode", "KEYED_MIX", "MODEXP",
    "TraceEvent", "RunReport", "parse_trace", "replay", "emit_report",
    "HeapError", "CapacityInvalid", "CorruptionDetected", "ChunkCorrupt", "NeighborCorrupt",
    "LinkCorrupt", "DoubleFree", "OutOfMemory", "RegionPoisoned",
]
