"""Seeded synthetic prompts standing in for the task corpus."""
from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

ALPHABET = (string.ascii_letters + string.digits + string.punctuation + " ").encode()


@dataclass(frozen=True)
class Workload:
    seed: int
    skew: float
    prompts: tuple[tuple[bytes, ...], ...]

    @property
    def tenants(self) -> int:
        return len(self.prompts)

    @property
    def total_requests(self) -> int:
        return sum(len(p) for p in self.prompts)


def make_workload(
    seed: int,
    tenants: int,
    requests: int,
    skew: float = 1.0,
    min_len: int = 8,
    max_len: int = 24,
) -> Workload:
    """``tenants`` x ``requests`` prompts with Zipf(``skew``)-distributed bytes.

    Byte ranks are a seeded permutation of the printable alphabet, so a high
    skew concentrates traffic on a few byte values (and hence on fewer experts).
    """
    if tenants < 1 or requests < 1:
        raise ValueError("tenants and requests must be >= 1")
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    rng = np.random.default_rng(seed)
    symbols = np.frombuffer(ALPHABET, dtype=np.uint8)[rng.permutation(len(ALPHABET))]
    weights = 1.0 / np.arange(1, len(symbols) + 1) ** skew
    probs = weights / weights.sum()
    prompts = []
    for _ in range(tenants):
        row = []
        for _ in range(requests):
            n = int(rng.integers(min_len, max_len + 1))
            row.append(bytes(rng.choice(symbols, size=n, p=probs).tolist()))
        prompts.append(tuple(row))
    return Workload(seed, skew, tuple(prompts))
