"""Rotation statistics for the free tree under repeated access."""

from __future__ import annotations

import math
import random

from .arena import HEADER_RESERVE, MIN_CHUNK, Arena
from .freetree import FreeTree, write_node
from .linkcodec import KEYED_MIX, LinkCodec, derive_key

PATTERNS = ("uniform", "sequential")


def build_tree(keys: list[int], seed: int = 0, codec: str = KEYED_MIX) -> FreeTree:
    """A tree holding one node per key, inserted in the given order."""
    arena = Arena(HEADER_RESERVE + MIN_CHUNK * (len(keys) + 1))
    lc = LinkCodec(derive_key(seed, codec), arena.capacity)
    tree = FreeTree(arena, lc)
    for i, k in enumerate(keys):
        node = HEADER_RESERVE + MIN_CHUNK * i
        write_node(arena, lc, node, k)
        tree.insert(node)
    return tree


def access_sequence(pattern: str, n: int, m: int, rng: random.Random) -> list[int]:
    if pattern == "uniform":
        return [rng.randint(1, n) for _ in range(m)]
    if pattern == "sequential":
        return [i % n + 1 for i in range(m)]
    raise ValueError(f"unknown access pattern {pattern!r}")


def rotation_bench(keys: int, ops: int, seed: int = 0, patterns=PATTERNS) -> dict:
    """Rotations per access, normalised by log2(n + 1), for each pattern."""
    rng = random.Random(seed)
    out = {"keys": keys, "ops": ops, "seed": seed, "patterns": {}}
    for pattern in patterns:
        order = list(range(1, keys + 1))
        rng.shuffle(order)
        tree = build_tree(order, seed)
        tree.rotation_count = 0
        for k in access_sequence(pattern, keys, ops, rng):
            tree.access(k)
        out["patterns"][pattern] = {
            "rotations": tree.rotation_count,
            "constant": tree.rotation_count / (ops * math.log2(keys + 1)),
        }
    return out
