"""Counter-based parameter streams: FNV-1a-64 path hashing feeding SplitMix64."""
from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the SplitMix64 stream seeded with ``seed``.

    SplitMix64 is counter based (the state after ``t`` steps is
    ``seed + (t + 1) * gamma``), so the whole stream is computed at once.
    """
    counter = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + counter * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def uniform_signed(seed: int, n: int, scale: float) -> np.ndarray:
    """``n`` float32 values in ``[-scale, scale)`` from the top 24 bits of each draw."""
    z = splitmix64(seed, n)
    u = (z >> np.uint64(40)).astype(np.float64) / float(1 << 24)
    return ((2.0 * u - 1.0) * scale).astype(np.float32)
