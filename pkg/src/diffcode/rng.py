"""Seeded random streams.

Every stochastic component draws from a stream derived from one integer
seed plus a stable name, so adding a new consumer never shifts the draws of
an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *names)``."""
    key = tuple(_key(n) if isinstance(n, str) else int(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
