"""Splay tree of free chunks keyed by size.

Each tree node lives inside a free chunk as a six-word record::

    +8   t_s  size (the search key, stored plain)
    +16  t_p  parent
    +24  t_l  left child
    +32  t_r  right child
    +40  t_n  next chunk of the same size
    +48  t_d  the node's own offset (self check)

Every link word goes through the region codec, so reading a link that was
overwritten by someone without the key raises LinkCorrupt.  There is one
tree node per distinct size; further chunks of that size hang off the node
in a LIFO chain through ``t_n`` and carry null tree links.
"""

from __future__ import annotations

from typing import Iterator, Optional

from .arena import Arena
from .errors import DuplicateChunk, HeapFault, LinkCorrupt, NotPresent, OrderViolation

T_S, T_P, T_L, T_R, T_N, T_D = 8, 16, 24, 32, 40, 48
SLOTS = {"t_s": T_S, "t_p": T_P, "t_l": T_L, "t_r": T_R, "t_n": T_N, "t_d": T_D}
LINK_SLOTS = ("t_p", "t_l", "t_r", "t_n", "t_d")


def write_node(arena: Arena, codec, node: int, key: int) -> None:
    """Initialise a node record: key set, links null, self link encoded."""
    arena.write_word(node + T_S, key)
    for slot in (T_P, T_L, T_R, T_N):
        arena.write_word(node + slot, codec.encode(0))
    arena.write_word(node + T_D, codec.encode(node))


class FreeTree:
    def __init__(self, arena: Arena, codec, root: int = 0):
        self.arena = arena
        self.codec = codec
        self._root = codec.encode(root)
        self.rotation_count = 0
        self._step_limit = arena.capacity // 8 + 2
        self.count, self.chunk_count = self._measure(root)

    # -- record access -----------------------------------------------------

    @property
    def root(self) -> int:
        return self.codec.decode(self._root)

    @root.setter
    def root(self, node: int) -> None:
        self._root = self.codec.encode(node)

    def key(self, node: int) -> int:
        return self.arena.read_word(node + T_S)

    def link(self, node: int, slot: int) -> int:
        return self.codec.decode(self.arena.read_word(node + slot))

    def set_link(self, node: int, slot: int, target: int) -> None:
        self.arena.write_word(node + slot, self.codec.encode(target))

    def check_node(self, node: int) -> None:
        if self.codec.hardened and self.link(node, T_D) != node:
            raise LinkCorrupt(f"node {node:#x} self link does not match")

    def _steps(self) -> Iterator[int]:
        for i in range(self._step_limit):
            yield i
        raise HeapFault("tree walk does not terminate")

    # -- rotations ---------------------------------------------------------

    def _rotate(self, x: int) -> None:
        """Rotate ``x`` above its parent, fixing the grandparent link."""
        p = self.link(x, T_P)
        g = self.link(p, T_P)
        if self.link(p, T_L) == x:
            b = self.link(x, T_R)
            self.set_link(p, T_L, b)
            self.set_link(x, T_R, p)
        else:
            b = self.link(x, T_L)
            self.set_link(p, T_R, b)
            self.set_link(x, T_L, p)
        if b:
            self.set_link(b, T_P, p)
        self.set_link(p, T_P, x)
        self.set_link(x, T_P, g)
        if g:
            self.set_link(g, T_L if self.link(g, T_L) == p else T_R, x)
        self.rotation_count += 1

    def _splay(self, x: int) -> None:
        """Bring ``x`` to the root of the tree containing it."""
        steps = self._steps()
        while True:
            next(steps)
            p = self.link(x, T_P)
            if not p:
                return
            g = self.link(p, T_P)
            if not g:
                self._rotate(x)
            elif (self.link(g, T_L) == p) == (self.link(p, T_L) == x):
                self._rotate(p)
                self._rotate(x)
            else:
                self._rotate(x)
                self._rotate(x)

    def _descend(self, root: int, key: int) -> int:
        """Last node on the search path for ``key`` below ``root``."""
        x, last = root, 0
        steps = self._steps()
        while x:
            next(steps)
            self.check_node(x)
            last = x
            k = self.key(x)
            if key == k:
                break
            x = self.link(x, T_L if key < k else T_R)
        return last

    def _extreme(self, root: int, slot: int) -> int:
        x = root
        steps = self._steps()
        while True:
            next(steps)
            nxt = self.link(x, slot)
            if not nxt:
                return x
            x = nxt

    # -- node-level primitives (roots in, roots out) -----------------------

    def _split_at(self, root: int, key: int) -> tuple[int, int]:
        if not root:
            return 0, 0
        r = self._descend(root, key)
        self._splay(r)
        return self._cut(r, key)

    def _cut(self, r: int, key: int) -> tuple[int, int]:
        """Break the root ``r`` away from one subtree, ordering by ``key``."""
        if self.key(r) <= key:
            right = self.link(r, T_R)
            if right:
                self.set_link(r, T_R, 0)
                self.set_link(right, T_P, 0)
            return r, right
        left = self.link(r, T_L)
        if left:
            self.set_link(r, T_L, 0)
            self.set_link(left, T_P, 0)
        return left, r

    def _join(self, left: int, right: int) -> int:
        if not left:
            return right
        if not right:
            return left
        top = self._extreme(left, T_R)
        self._splay(top)
        self.set_link(top, T_R, right)
        self.set_link(right, T_P, top)
        return top

    def _measure(self, root: int) -> tuple[int, int]:
        nodes = chunks = 0
        for _, length in self._walk(root):
            nodes += 1
            chunks += length
        return nodes, chunks

    def _walk(self, root: int) -> Iterator[tuple[int, int]]:
        """In-order (node, chain length) pairs below ``root``; read only."""
        stack: list[int] = []
        x = root
        steps = self._steps()
        while stack or x:
            next(steps)
            while x:
                stack.append(x)
                x = self.link(x, T_L)
                next(steps)
            x = stack.pop()
            yield x, len(self.chain(x))
            x = self.link(x, T_R)

    # -- public operations -------------------------------------------------

    def chain(self, head: int) -> list[int]:
        """The node followed by its same-size chain members."""
        out = [head]
        steps = self._steps()
        nxt = self.link(head, T_N)
        while nxt:
            next(steps)
            out.append(nxt)
            nxt = self.link(nxt, T_N)
        return out

    def access(self, key: int) -> Optional[int]:
        """Splay the node for ``key`` (or the last node searched) to the root."""
        root = self.root
        if not root:
            return None
        last = self._descend(root, key)
        self._splay(last)
        self.root = last
        return last if self.key(last) == key else None

    def insert(self, node: int) -> None:
        """Insert the chunk whose record starts at ``node``; its t_s must be set."""
        k = self.key(node)
        root = self.root
        if root:
            last = self._descend(root, k)
            self._splay(last)
            self.root = root = last
            if self.key(root) == k:
                if node in self.chain(root):
                    raise DuplicateChunk(f"chunk {node:#x} is already free")
                for slot in (T_P, T_L, T_R):
                    self.set_link(node, slot, 0)
                self.set_link(node, T_N, self.link(root, T_N))
                self.set_link(node, T_D, node)
                self.set_link(root, T_N, node)
                self.chunk_count += 1
                return
        left, right = self._cut(root, k) if root else (0, 0)
        self.set_link(node, T_P, 0)
        self.set_link(node, T_L, left)
        self.set_link(node, T_R, right)
        self.set_link(node, T_N, 0)
        self.set_link(node, T_D, node)
        if left:
            self.set_link(left, T_P, node)
        if right:
            self.set_link(right, T_P, node)
        self.root = node
        self.count += 1
        self.chunk_count += 1

    def delete(self, node: int) -> None:
        k = self.key(node)
        head = self.access(k)
        if head is None:
            raise NotPresent(f"no free chunk of size {k}")
        if head != node:
            prev = head
            steps = self._steps()
            while True:
                next(steps)
                cur = self.link(prev, T_N)
                if not cur:
                    raise NotPresent(f"chunk {node:#x} not in the size-{k} chain")
                if cur == node:
                    self.set_link(prev, T_N, self.link(node, T_N))
                    self.set_link(node, T_N, 0)
                    break
                prev = cur
            self.chunk_count -= 1
            return

        left = self.link(node, T_L)
        right = self.link(node, T_R)
        heir = self.link(node, T_N)
        if heir:
            # promote the next chain member into the node's tree position
            self.check_node(heir)
            self.set_link(heir, T_P, 0)
            self.set_link(heir, T_L, left)
            self.set_link(heir, T_R, right)
            if left:
                self.set_link(left, T_P, heir)
            if right:
                self.set_link(right, T_P, heir)
            self.root = heir
        else:
            if left:
                self.set_link(left, T_P, 0)
            if right:
                self.set_link(right, T_P, 0)
            self.root = self._join(left, right)
            self.count -= 1
        for slot in (T_P, T_L, T_R, T_N):
            self.set_link(node, slot, 0)
        self.chunk_count -= 1

    def find_best_fit(self, need: int) -> Optional[int]:
        """Chunk with the smallest size >= ``need``; the tree is not modified
        except for splaying the chosen node (or the search endpoint)."""
        root = self.root
        if not root:
            return None
        x, last, best = root, 0, 0
        steps = self._steps()
        while x:
            next(steps)
            self.check_node(x)
            last = x
            k = self.key(x)
            if k >= need:
                best = x
                if k == need:
                    break
                x = self.link(x, T_L)
            else:
                x = self.link(x, T_R)
        top = best or last
        self._splay(top)
        self.root = top
        if not best:
            return None
        member = self.link(best, T_N)
        if member:
            self.check_node(member)
        return member or best

    def split(self, key: int) -> tuple["FreeTree", "FreeTree"]:
        """Split into (keys <= key, keys > key).  This tree is left empty."""
        left, right = self._split_at(self.root, key)
        t1 = FreeTree(self.arena, self.codec, left)
        t2 = FreeTree(self.arena, self.codec, right)
        t1.rotation_count = self.rotation_count
        self.root = 0
        self.count = self.chunk_count = 0
        return t1, t2

    @classmethod
    def join(cls, t1: "FreeTree", t2: "FreeTree") -> "FreeTree":
        """Combine two trees whose keys are ordered t1 < t2; both are emptied."""
        r1, r2 = t1.root, t2.root
        if r1 and r2 and t1.key(t1._extreme(r1, T_R)) >= t2.key(t2._extreme(r2, T_L)):
            raise OrderViolation("every key of the left tree must be below the right tree")
        out = cls(t1.arena, t1.codec)
        out.root = t1._join(r1, r2)
        out.rotation_count = t1.rotation_count + t2.rotation_count
        out.count = t1.count + t2.count
        out.chunk_count = t1.chunk_count + t2.chunk_count
        for t in (t1, t2):
            t.root = 0
            t.count = t.chunk_count = 0
        return out

    # -- inspection --------------------------------------------------------

    def items(self) -> list[tuple[int, int]]:
        """In-order (size, chain length) pairs."""
        return [(self.key(n), length) for n, length in self._walk(self.root)]

    def keys(self) -> list[int]:
        return [self.key(n) for n, _ in self._walk(self.root)]

    def nodes(self) -> Iterator[int]:
        """Every chunk in the tree, tree nodes and chain members alike."""
        for n, _ in self._walk(self.root):
            yield from self.chain(n)

    def max_key(self) -> Optional[int]:
        root = self.root
        return self.key(self._extreme(root, T_R)) if root else None

    def validate(self) -> None:
        """Assert BST order, parent back-links and chain keys; read only."""
        root = self.root
        if root and self.link(root, T_P):
            raise LinkCorrupt("root has a parent")
        prev_key = None
        for n, _ in self._walk(root):
            k = self.key(n)
            if prev_key is not None and k <= prev_key:
                raise OrderViolation(f"in-order keys not increasing at {n:#x}")
            prev_key = k
            self.check_node(n)
            for slot in (T_L, T_R):
                child = self.link(n, slot)
                if child and self.link(child, T_P) != n:
                    raise LinkCorrupt(f"child of {n:#x} has wrong parent")
            for member in self.chain(n)[1:]:
                if self.key(member) != k:
                    raise OrderViolation(f"chain member {member:#x} has wrong size")
