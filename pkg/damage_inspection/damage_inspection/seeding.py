#!/usr/bin/env python3
"""
Portable seeded randomness.

Every stochastic operation draws from SplitMix64 so results are identical
across runs, platforms and Python versions:

    state += 0x9E3779B97F4A7C15
    z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)                     (all arithmetic mod 2**64)

Sub-seeds for independent streams (per tree, per fixture image, per
subcommand) come from derive_seed(seed, *labels), which folds each label
through the same finalizer.
"""

import hashlib
from typing import List, MutableSequence, Sequence, TypeVar, Union

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

T = TypeVar("T")


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _label_value(label: Union[int, str]) -> int:
    if isinstance(label, str):
        return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")
    return int(label) & MASK64


def derive_seed(seed: int, *labels: Union[int, str]) -> int:
    """Deterministic 64-bit sub-seed for the stream named by labels."""
    value = int(seed) & MASK64
    for label in labels:
        value = _mix64((value ^ _mix64((_label_value(label) + GOLDEN_GAMMA) & MASK64)) & MASK64)
    return value


class SplitMix64:
    """Minimal SplitMix64 generator."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix64(self.state)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection, free of modulo bias."""
        if n <= 0:
            raise ValueError("below() needs a positive bound")
        limit = (MASK64 + 1) - ((MASK64 + 1) % n)
        while True:
            value = self.next_u64()
            if value < limit:
                return value % n

    def random(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def between(self, low: int, high: int) -> int:
        """Uniform integer in [low, high]."""
        return low + self.below(high - low + 1)

    def shuffle(self, items: MutableSequence[T]) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, population: int, k: int) -> List[int]:
        """k distinct indices from range(population) (partial Fisher-Yates)."""
        if k > population:
            raise ValueError(f"cannot sample {k} from {population}")
        pool = list(range(population))
        for i in range(k):
            j = i + self.below(population - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def choices(self, population: Sequence[T], k: int) -> List[T]:
        """k draws with replacement."""
        return [population[self.below(len(population))] for _ in range(k)]

    def _block(self, count: int) -> "np.ndarray":
        states = (np.uint64(self.state)
                  + np.uint64(GOLDEN_GAMMA) * np.arange(1, count + 1, dtype=np.uint64))
        self.state = int(states[-1]) if count else self.state
        z = states
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def integers(self, n: int, size: int) -> "np.ndarray":
        """Vectorised below(n) draws; yields exactly the values of `size` successive below(n) calls."""
        if n <= 0:
            raise ValueError("integers() needs a positive bound")
        limit = (MASK64 + 1) - ((MASK64 + 1) % n)
        out = np.empty(size, dtype=np.int64)
        filled = 0
        while filled < size:
            raw = self._block(size - filled)
            if limit <= MASK64:
                rejected = np.flatnonzero(raw >= np.uint64(limit))
                if rejected.size:
                    # keep the draws before the first rejection and rewind the state after it
                    first = int(rejected[0])
                    self.state = (self.state - (len(raw) - first - 1) * GOLDEN_GAMMA) & MASK64
                    raw = raw[:first]
            out[filled:filled + len(raw)] = (raw % np.uint64(n)).astype(np.int64)
            filled += len(raw)
        return out
