"""Named random streams derived from one integer seed.

``stream(seed, "cav", "run3")`` always yields the same generator for the same
names, independently of how many other streams were drawn before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(names) -> tuple:
    return tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)


def stream(seed: int, *names) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_key(names))
    return np.random.Generator(np.random.PCG64(ss))
