"""Reproducible random streams.

Every simulated path draws from its own counter-based generator keyed by
``(seed, path_index)``, so results never depend on how paths are batched or
scheduled.  A single user-facing seed expands into per-module seeds through
:func:`module_seed`.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def path_rng(seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def _mix64(x: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer.
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(0xBF58476D1CE4E5B9)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def counter_normals(seed: int, stream: np.ndarray, counters: np.ndarray) -> np.ndarray:
    """Standard normals addressed by ``(seed, stream, counter)``.

    SplitMix64 evaluated at arbitrary positions, mapped through the inverse
    normal CDF.  Used where draws must be random-access (the value at a
    position never depends on which other positions were requested).
    ``stream`` and ``counters`` broadcast against each other.
    """
    with np.errstate(over="ignore"):
        seed_word = np.uint64(int(seed) % 2**64)
        key = _mix64(_mix64(np.asarray(stream, dtype=np.uint64) * _GOLDEN + seed_word))
        bits = _mix64(key + (np.asarray(counters, dtype=np.uint64) + np.uint64(1)) * _GOLDEN)
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def module_seed(seed: int, name: str) -> int:
    """64-bit seed for module ``name``: first 8 bytes of sha256("<seed>:<name>")."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def chunks(total: int, size: int):
    for start in range(0, total, size):
        yield start, min(total, start + size)
