"""Portable seeded random streams.

Index shuffles (dataset splits, batch orders, synthetic corpora) use a pure
Python xoshiro256** generator so that a seed maps to the same permutation on
every platform and numpy release. Bulk float draws (weight init, dropout masks)
use numpy's PCG64 through :func:`numpy_stream`.
"""

from __future__ import annotations

from typing import MutableSequence, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

_MASK = (1 << 64) - 1

# Named stream ids. Changing these changes every seeded result.
STREAM_ENCODER_INIT = 0
STREAM_HEAD_INIT = 1
STREAM_BATCHES = 2
STREAM_SCHEDULE = 3
STREAM_DROPOUT = 4
STREAM_SPLIT = 5
STREAM_SYNTH = 6
STREAM_HPO = 7
STREAM_SUBSAMPLE = 8
STREAM_SYNTH_EXAMPLES = 9

XOSHIRO_VERSION = "xoshiro256**/splitmix64-v1"


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** seeded through splitmix64.

    ``Xoshiro256(seed, stream)`` gives independent sequences for different
    stream ids under the same seed.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative")
        sm = (seed & _MASK) ^ _rotl(stream & _MASK, 32) ^ ((stream * 0xD1B54A32D192ED03) & _MASK)
        s = []
        for _ in range(4):
            sm, z = _splitmix64(sm)
            s.append(z)
        if not any(s):
            s[0] = 1
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: MutableSequence[T]) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx

    def choice(self, items: Sequence[T]) -> T:
        return items[self.randbelow(len(items))]


def numpy_stream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """A PCG64 generator keyed by ``(seed, stream, *extra)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream, *extra])))
