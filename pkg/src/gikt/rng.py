"""Deterministic named random substreams.

Every source of randomness in a run (splitting, parameter init, neighbor
sampling, dropout, batch shuffling) draws from its own generator derived
from the single root seed plus a stream name, so components stay
reproducible independently of one another.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for (seed, name), stable across runs and platforms."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    tag = zlib.crc32(name.encode("utf8"))
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))
