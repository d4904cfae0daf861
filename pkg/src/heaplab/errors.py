"""Exception hierarchy shared by every layer of the allocator."""


class HeapError(Exception):
    """Base class for all allocator errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__


class CapacityInvalid(HeapError, ValueError):
    pass


class OffsetInvalid(HeapError, ValueError):
    pass


class ChunkBusy(HeapError):
    pass


class NotPresent(HeapError, KeyError):
    pass


class OrderViolation(HeapError, ValueError):
    pass


class OutOfMemory(HeapError, MemoryError):
    pass


class RegionPoisoned(HeapError):
    """Raised by every mutating call once corruption has been detected."""


class HeapFault(HeapError):
    """The allocator walked into an impossible state it has no check for.

    Only reachable when integrity checks are disabled: it stands in for the
    crash or wild write an undefended allocator would perform.
    """


class CorruptionDetected(HeapError):
    """Base for the detection events; raising one poisons the region."""


class ChunkCorrupt(CorruptionDetected):
    pass


class NeighborCorrupt(CorruptionDetected):
    pass


class LinkCorrupt(CorruptionDetected):
    pass


class DoubleFree(CorruptionDetected):
    pass


class DuplicateChunk(CorruptionDetected):
    pass


class TraceError(Exception):
    """Problems with a trace document itself, never with the heap."""


class ParseError(TraceError):
    def __init__(self, message: str, line: int, column: int = 1, source: str = ""):
        where = f"{source}: " if source else ""
        super().__init__(f"{where}line {line}, column {column}: {message}")
        self.message = message
        self.line = line
        self.column = column
        self.source = source


class UnknownOp(ParseError):
    pass


class MissingField(ParseError):
    pass


class ReplayError(TraceError):
    pass
