"""Labeled seed derivation.

Every random stream in a run is derived from one root seed plus a label and a
counter, so that adding a new consumer never perturbs an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def derive_seed(root: int, label: str, counter: int = 0) -> int:
    ss = np.random.SeedSequence([int(root) & (2**64 - 1), label_key(label), int(counter)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(root: int, label: str, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label, counter))


_M = np.uint64(0xFFFFFFFFFFFFFFFF)


def hash_u64(*parts) -> np.ndarray:
    """Counter-based hash (splitmix64 chain) over broadcastable integer arrays."""
    with np.errstate(over="ignore"):
        h = np.uint64(0x9E3779B97F4A7C15)
        for p in parts:
            if isinstance(p, (int, np.integer)):
                p = np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF)
            else:
                p = np.asarray(p, dtype=np.int64).view(np.uint64)
            x = p + h
            x = x + np.uint64(0x9E3779B97F4A7C15)
            x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            h = x ^ (x >> np.uint64(31))
    return h


def hash_unit(*parts) -> np.ndarray:
    """Uniform floats in [0, 1) from the counter hash."""
    return (hash_u64(*parts) >> np.uint64(11)).astype(np.float64) / float(2**53)
