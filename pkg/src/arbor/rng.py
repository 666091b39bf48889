"""Named random sub-streams derived from one root seed."""
import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for sub-stream ``name`` of root ``seed``.

    The same (seed, name) pair always yields the same sequence, and distinct
    names give statistically independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())]))
