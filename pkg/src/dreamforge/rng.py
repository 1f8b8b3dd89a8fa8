"""Deterministic randomness and hashing primitives.

splitmix64 is the engine's only randomness source for data operations; it is
trivially portable, so shuffles reproduce bit-for-bit on every platform.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


class SplitMix64:
    """splitmix64 generator over a 64-bit state."""

    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def fisher_yates(items: list, seed: int) -> None:
    """Shuffle items in place: Fisher-Yates from index n-1 down to 1,
    j = next_u64() mod (i+1), indices drawn from splitmix64(seed)."""
    rng = SplitMix64(seed)
    for i in range(len(items) - 1, 0, -1):
        j = rng.next_u64() % (i + 1)
        items[i], items[j] = items[j], items[i]


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a (offset 0xcbf29ce484222325, prime 0x100000001b3)."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h
