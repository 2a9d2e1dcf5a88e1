"""Sparse radix tree keyed by page address (the global page table)."""

from __future__ import annotations

BITS = 6
FANOUT = 1 << BITS
MASK = FANOUT - 1


class _Node:
    __slots__ = ("slots", "count")

    def __init__(self):
        self.slots = [None] * FANOUT
        self.count = 0


class RadixTree:
    """Wide, shallow tree: lookup cost depends only on the key width.

    Interior nodes are created on insert and freed when they become empty, so
    nothing proportional to the key space is allocated up front.
    """

    def __init__(self, key_bits: int):
        if key_bits < 1:
            raise ValueError("key_bits must be >= 1")
        self.key_bits = key_bits
        self.depth = -(-key_bits // BITS)
        self._shifts = [BITS * i for i in range(self.depth - 1, -1, -1)]
        self._limit = 1 << key_bits
        self._root = _Node()
        self._len = 0

    def __len__(self):
        return self._len

    def _check(self, key: int) -> None:
        if not 0 <= key < self._limit:
            raise KeyError(key)

    def get(self, key: int, default=None):
        if not 0 <= key < self._limit:
            return default
        node = self._root
        for shift in self._shifts:
            node = node.slots[(key >> shift) & MASK]
            if node is None:
                return default
        return node

    def __contains__(self, key: int) -> bool:
        return self.get(key) is not None

    def __getitem__(self, key: int):
        value = self.get(key)
        if value is None:
            raise KeyError(key)
        return value

    def insert(self, key: int, value) -> None:
        if value is None:
            raise ValueError("None is reserved for absent entries")
        self._check(key)
        node = self._root
        for shift in self._shifts[:-1]:
            i = (key >> shift) & MASK
            child = node.slots[i]
            if child is None:
                child = node.slots[i] = _Node()
                node.count += 1
            node = child
        i = key & MASK
        if node.slots[i] is None:
            node.count += 1
            self._len += 1
        node.slots[i] = value

    __setitem__ = insert

    def delete(self, key: int):
        """Remove ``key`` and return its value (None if absent)."""
        if not 0 <= key < self._limit:
            return None
        path = []
        node = self._root
        for shift in self._shifts[:-1]:
            i = (key >> shift) & MASK
            child = node.slots[i]
            if child is None:
                return None
            path.append((node, i))
            node = child
        i = key & MASK
        value = node.slots[i]
        if value is None:
            return None
        node.slots[i] = None
        node.count -= 1
        self._len -= 1
        # prune emptied interior nodes
        while node.count == 0 and path:
            parent, j = path.pop()
            parent.slots[j] = None
            parent.count -= 1
            node = parent
        return value

    def node_count(self) -> int:
        def walk(node, level):
            if level == self.depth - 1:
                return 1
            return 1 + sum(walk(c, level + 1) for c in node.slots if c is not None)

        return walk(self._root, 0)

    def items(self):
        """(key, value) pairs in ascending key order."""

        def walk(node, prefix, level):
            for i, child in enumerate(node.slots):
                if child is None:
                    continue
                key = (prefix << BITS) | i
                if level == self.depth - 1:
                    yield key, child
                else:
                    yield from walk(child, key, level + 1)

        yield from walk(self._root, 0, 0)
