"""``heaplab`` command line: replay traces, run the attack corpus, bench the tree."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .bench import rotation_bench
from .corpus import format_summary, run_attack_corpus, write_standard_corpus
from .errors import TraceError
from .linkcodec import CODECS, KEYED_MIX
from .trace import CLEAN, DETECTED, emit_report, parse_trace, replay

EXIT_CODES = {CLEAN: 0, DETECTED: 2, "corruption_missed": 3}
EXIT_USAGE = 1


def _default_seed() -> int:
    raw = os.environ.get("HEAPLAB_SEED", "0")
    try:
        return int(raw, 0)
    except ValueError:
        raise SystemExit(f"heaplab: HEAPLAB_SEED must be an integer, got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heaplab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("replay", help="replay one trace file")
    p.add_argument("--trace", required=True, help="line-delimited JSON trace")
    p.add_argument("--seed", type=int, default=None, help="key seed (default: $HEAPLAB_SEED or 0)")
    p.add_argument("--codec", choices=CODECS, default=KEYED_MIX)
    p.add_argument("--unhardened", action="store_true", help="disable guard and link verification")
    p.add_argument("--format", choices=("json", "text"), default="json")

    p = sub.add_parser("corpus", help="replay every trace in a directory under many seeds")
    p.add_argument("--dir", required=True)
    p.add_argument("--seeds", type=int, required=True)
    p.add_argument("--seed", type=int, default=None, help="first seed (default: $HEAPLAB_SEED or 0)")
    p.add_argument("--codec", choices=CODECS, default=KEYED_MIX)
    p.add_argument("--format", choices=("json", "text"), default="text")

    p = sub.add_parser("bench", help="splay rotation statistics")
    p.add_argument("--keys", type=int, required=True)
    p.add_argument("--ops", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("generate", help="write the standard attack corpus")
    p.add_argument("--dir", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = _default_seed()

    try:
        if args.command == "replay":
            with open(args.trace, encoding="utf-8") as fh:
                events = parse_trace(fh.read())
            report = replay(events, seed, args.codec, not args.unhardened)
            sys.stdout.write(emit_report(report, args.format))
            return EXIT_CODES[report.verdict]
        if args.command == "corpus":
            summary = run_attack_corpus(args.dir, args.seeds, seed, args.codec)
            if args.format == "json":
                sys.stdout.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
            else:
                sys.stdout.write(format_summary(summary))
            return 0
        if args.command == "bench":
            result = rotation_bench(args.keys, args.ops, seed)
            for name, row in result["patterns"].items():
                print(f"{name:<12} rotations={row['rotations']:<10} "
                      f"C = rotations / (m log2(n+1)) = {row['constant']:.4f}")
            return 0
        if args.command == "generate":
            for path in write_standard_corpus(args.dir):
                print(path)
            return 0
    except (OSError, TraceError) as exc:
        print(f"heaplab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
