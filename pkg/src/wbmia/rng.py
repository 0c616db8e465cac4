"""Keyed random streams.

Every random draw in the package comes from a Philox counter-based generator
whose key is derived (via ``numpy.random.SeedSequence``) from a tuple of
non-negative integers, e.g. ``(master_seed, participant, round)``. Two streams
with distinct keys are statistically independent and a stream depends only on
its key, so runs replay exactly regardless of call order.
"""

import zlib

import numpy as np


def stream(*key) -> np.random.Generator:
    """Return a fresh generator keyed by ``key`` (ints or short strings)."""
    words = []
    for k in key:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode()))
        else:
            k = int(k)
            if k < 0:
                raise ValueError(f"rng key components must be >= 0, got {k}")
            words.append(k)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def draw_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for keying a child stream."""
    return int(rng.integers(0, 2**63 - 1))
