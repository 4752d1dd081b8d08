"""Seeded random-number substreams.

Every source of randomness in the package flows from a single integer seed
through a :class:`SeedTree`.  A tree node hands out *named* streams
("indices-I", "indices-J", "termination", "data"), each backed by its own
counter-based Philox generator, so that two algorithms run from the same node
consume identical index streams even when they make a different number of
draws overall: the oracle draws of Online EM come from the same "indices-J"
stream positions as the second draws of FIEM.

Child nodes (``tree.child(r)``) derive per-replica trees deterministically.
"""
from __future__ import annotations

import hashlib

import numpy as np

STREAM_INDICES_I = "indices-I"
STREAM_INDICES_J = "indices-J"
STREAM_TERMINATION = "termination"
STREAM_DATA = "data"


def _name_key(name: str) -> tuple[int, int]:
    # stable 64-bit tag for a stream name, split into two uint32 words
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return (
        int.from_bytes(digest[0:4], "little"),
        int.from_bytes(digest[4:8], "little"),
    )


class SeedTree:
    """Deterministic hierarchy of named random streams under one seed."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)

    def stream(self, name: str) -> np.random.Generator:
        """Independent generator for the named stream of this node."""
        key = np.random.SeedSequence(self.seed, spawn_key=self.path + _name_key(name))
        return np.random.Generator(np.random.Philox(key))

    def child(self, index: int) -> "SeedTree":
        """Sub-tree for replica ``index``; disjoint from every sibling."""
        if index < 0:
            raise ValueError("child index must be non-negative")
        return SeedTree(self.seed, self.path + (int(index),))

    def __repr__(self) -> str:  # pragma: no cover
        return f"SeedTree(seed={self.seed}, path={self.path})"


def as_seed_tree(seed) -> SeedTree:
    """Accept either an integer seed or an existing tree."""
    if isinstance(seed, SeedTree):
        return seed
    return SeedTree(int(seed))
