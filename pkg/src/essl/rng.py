"""Named, splittable random streams.

Every stochastic operation takes an explicit ``numpy.random.Generator``. Streams
are derived from a global seed plus a path of keys (strings or integers), so the
stream for e.g. ``("pair", 17)`` is the same regardless of how many other
streams were drawn before it or in which worker it is created.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream keys must be non-negative, got {part}")
    return int(part)


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator identified by ``seed`` and ``path``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(seq))
