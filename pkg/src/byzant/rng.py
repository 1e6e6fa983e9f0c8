"""Counter-based random streams.

Every random draw in a simulation comes from a Philox generator whose
key/counter encode (seed, worker, round, purpose).  A stream can be
reconstructed at any point, in any order, on any schedule, which is what
makes results independent of evaluation order and thread count.
"""

from __future__ import annotations

import numpy as np

# Purpose tags partition the counter space.  The high counter words hold
# (round, tag); in-stream draws only advance the low words, so two distinct
# streams can never collide no matter how much either one draws.
TAG_BUILD = 0
TAG_INIT = 1
TAG_GRAD = 2
TAG_ATTACK = 3
TAG_BYZANTINE = 4
TAG_PARTICIPATION = 5
TAG_TRIAL = 6
TAG_PROBE = 7

_MASK64 = (1 << 64) - 1


def stream(seed: int, worker: int = 0, round_: int = 0, tag: int = TAG_BUILD) -> np.random.Generator:
    """Return the generator for the (seed, worker, round, tag) stream."""
    key = np.array([seed & _MASK64, worker & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, round_ & _MASK64, tag & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def mix_seed(seed: int, *parts: int) -> int:
    """Derive a child seed from integer parts (for nested replications)."""
    out = seed & _MASK64
    for p in parts:
        out = (out * 0x9E3779B97F4A7C15 + (p & _MASK64) + 1) & _MASK64
    return out
