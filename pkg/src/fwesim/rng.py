"""Deterministic random-stream derivation.

Every stochastic routine in the package draws from a generator derived via
``substream(seed, *path)``.  The path is a tuple of small integers naming the
consumer (campaign cell, analysis index, resample index, ...), so results are
a pure function of (seed, path) and independent of scheduling or worker
count.
"""

from __future__ import annotations

import numpy as np

# Fixed tags keep substreams for different purposes disjoint even when their
# numeric paths collide.
STREAM_POOL = 1
STREAM_ANALYSIS = 2
STREAM_RESAMPLE = 3
STREAM_ITERATION = 4
STREAM_FIELD = 5
STREAM_PARADIGM = 6
STREAM_SPLIT = 7


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return a generator for the stream named by ``path`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
