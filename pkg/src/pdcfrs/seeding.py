"""Named, reproducible random streams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *names)``.

    ``names`` may mix strings and non-negative integers, e.g.
    ``stream(seed, "perturb", user)``. The same key always yields the same
    sequence regardless of which other streams were consumed.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))
