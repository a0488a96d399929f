"""Hierarchical RNG derivation.

Every command seeds one root; consumers get independent child generators
keyed by name, so adding a consumer never perturbs the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def child_rng(seed: int, *tags) -> np.random.Generator:
    """Generator for consumer `tags` under root `seed`.

    Tags may be strings or ints; strings are hashed with crc32 so the
    derivation is stable across runs and platforms.
    """
    key = tuple(
        t if isinstance(t, int) else zlib.crc32(str(t).encode()) for t in tags
    )
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
