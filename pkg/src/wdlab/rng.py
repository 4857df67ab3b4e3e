"""Named, splittable random streams.

Every stream is a Philox counter-based generator keyed by an integer seed and a
tuple of stream names, so independent consumers (task A inputs, task B labeler,
SGD shuffling, ...) never share state and results are platform independent.
"""
from __future__ import annotations

import zlib

import numpy as np


def _name_key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Return the generator for ``(seed, *names)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(_name_key(n) for n in names)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
