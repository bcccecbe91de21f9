"""Deterministic random streams keyed by (seed, *keys)."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *keys) -> np.random.Generator:
    """Return a counter-based (Philox) generator keyed by ``seed`` and ``keys``.

    The same ``(seed, *keys)`` always yields the same sequence, independent of
    how many other streams were created before it. String keys are hashed.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
