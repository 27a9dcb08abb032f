"""Deterministic hierarchical RNG streams.

Every stochastic routine takes an explicit stream (or a seed from which it
derives one), so reruns with the same config reproduce all artifacts and
parallel/serial execution orders cannot change results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(root_seed: int, *path: object) -> int:
    """Derive a 64-bit seed from a root seed and a path of labels."""
    key = "/".join([str(int(root_seed))] + [str(p) for p in path])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root_seed: int, *path: object) -> np.random.Generator:
    """A numpy Generator for the given (seed, path) address."""
    return np.random.default_rng(child_seed(root_seed, *path))
