"""
Splay tree of free chunks
=========================

The free tree keeps one node per chunk size and splays whatever it touches
to the root.  Here we watch a small tree change shape, then measure the
amortised rotation count on a larger one.
"""

import math
import random

from heaplab.bench import access_sequence, build_tree, rotation_bench
from heaplab.freetree import T_L, T_R


def shape(tree, node=None, depth=0):
    node = tree.root if node is None else node
    if not node:
        return
    shape(tree, tree.link(node, T_R), depth + 1)
    print("    " * depth + str(tree.key(node)))
    shape(tree, tree.link(node, T_L), depth + 1)


tree = build_tree([40, 20, 60, 10, 30, 50, 70])
print("after inserting 40 20 60 10 30 50 70 (root on the left, right subtree up):")
shape(tree)

tree.access(30)
print("\nafter access(30):")
shape(tree)

node = tree.find_best_fit(45)
print("\nbest fit for 45 ->", tree.key(node), "and it is now the root:", tree.root == node)

t1, t2 = tree.split(40)
print("\nsplit at 40:", t1.keys(), t2.keys())
joined = type(tree).join(t1, t2)
print("joined back:", joined.keys())

# Amortised cost: rotations per access against log2(n + 1)
n, m = 256, 20_000
rng = random.Random(0)
for pattern in ("uniform", "sequential"):
    t = build_tree(rng.sample(range(1, n + 1), n))
    t.rotation_count = 0
    for k in access_sequence(pattern, n, m, rng):
        t.access(k)
    print(f"{pattern:<10} rotations/access = {t.rotation_count / m:6.2f}   log2(n+1) = {math.log2(n + 1):.2f}")

print(rotation_bench(64, 5000)["patterns"])
