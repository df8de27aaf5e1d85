"""Named, order-independent random streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, float):
        return zlib.crc32(repr(part).encode())
    return zlib.crc32(str(part).encode())


def stream(seed: int, *names) -> np.random.Generator:
    """Generator for the sub-stream ``names`` of ``seed``.

    Each name component (string, int or float) is hashed stably, so the same
    path always yields the same stream regardless of call order.
    """
    entropy = [int(seed) & 0xFFFFFFFF] + [_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def child_seed(seed: int, *names) -> int:
    return int(stream(seed, *names).integers(0, 2**31 - 1))
