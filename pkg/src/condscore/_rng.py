"""Deterministic random sub-streams.

Every random draw in the package comes from a generator keyed by
``(master_seed, tag, *index)``.  Streams with different keys are statistically
independent and do not depend on the order in which they are created, so
blockwise, chainwise and stepwise draws are reproducible in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Return the generator for sub-stream ``(seed, tag, *index)``."""
    key = (_tag_key(tag),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed: int, tag: str, *index: int) -> int:
    """Derive a 64-bit seed for a nested component (e.g. one training run)."""
    return int(stream(seed, tag, *index).integers(0, 2**63 - 1, dtype=np.int64))


def as_generator(seed, tag: str) -> np.random.Generator:
    """Pass a Generator through unchanged; otherwise open sub-stream ``(seed, tag)``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return stream(seed, tag)
