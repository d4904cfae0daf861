"""
Attack corpus differential
==========================

Writes the bundled traces to a temporary directory and replays each under
many keys, hardened and unhardened.  The interesting column is the
difference: what the guards and link encoding catch that the bare
allocator lets through.  Same as ``heaplab corpus --dir corpus --seeds 25``.
"""

import tempfile

from heaplab.corpus import format_summary, run_attack_corpus, write_standard_corpus

with tempfile.TemporaryDirectory() as d:
    paths = write_standard_corpus(d)
    print(len(paths), "traces")
    summary = run_attack_corpus(d, seeds=25)

print(format_summary(summary))
for row in summary["traces"]:
    print(f"{row['trace']:<34} {row['class']:<15} hardened {row['hardened']:>3}  unhardened {row['unhardened']:>3}")
