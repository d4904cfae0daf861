"""
Heap overflow walkthrough
=========================

Three blocks of 96, 80 and 80 bytes.  Writing 120 bytes into the first one
runs over its footer and into the header of the second.  The hardened
region notices when the damaged block is freed; the unhardened one does not.
"""

from heaplab import ChunkCorrupt, vmopen
from heaplab.corpus import three_block_trace
from heaplab.trace import emit_report, replay

vm = vmopen(4096, key_seed=1)
a, b, c = vm.vmalloc(96), vm.vmalloc(80), vm.vmalloc(80)
print("payload offsets:", a, b, c)
for blk in (a, b, c):
    hdr = vm.arena.read_header(blk - 8)
    print(f"  chunk at {blk - 8:#06x}: size {hdr.size}, busy {hdr.busy}, guard {hdr.guard:#06x}")

# the oversized copy: 120 'A' bytes into a 96-byte payload
vm.arena.write_bytes(a, b"A" * 120)
print("header of b after the copy:", hex(vm.arena.read_word(b - 8)))
print("b still verifies?", vm.arena.verify_chunk(b - 8, vm.gkey))

try:
    vm.vmfree(a)
except ChunkCorrupt as exc:
    print("free(a) refused:", exc)
print("region poisoned:", vm.poisoned)

# The same story as a trace, replayed both ways
events = three_block_trace(120)
print()
print(emit_report(replay(events, seed=1), "text"))
print(emit_report(replay(events, seed=1, hardened=False), "text"))

# A write that fits exactly is not an attack
print(replay(three_block_trace(96), seed=1).verdict)
