"""Seeded xoshiro256++ generator.

Every random decision in the package (initialisation, shuffles, augmentation
draws, synthetic data) goes through :class:`Xoshiro256pp`, so results only
depend on the seed and never on numpy's global state.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def derive_seed(base: int, *parts) -> int:
    """Stable u64 seed for a named sub-stream, e.g. ``derive_seed(s, "aug", epoch, idx)``."""
    key = repr((int(base) & MASK64,) + tuple(parts)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _rotl_arr(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Xoshiro256pp:
    """xoshiro256++ (Blackman & Vigna) seeded from a u64 through splitmix64."""

    def __init__(self, seed: int = 0, *, state: tuple[int, int, int, int] | None = None):
        if state is None:
            x = int(seed) & MASK64
            s = []
            for _ in range(4):
                x, out = splitmix64(x)
                s.append(out)
            state = tuple(s)
        if not any(state):
            raise ValueError("xoshiro256++ state must not be all zero")
        self.s = [int(v) & MASK64 for v in state]

    @classmethod
    def derive(cls, base: int, *parts) -> "Xoshiro256pp":
        return cls(derive_seed(base, *parts))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of resolution."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * self.random()

    def randint(self, low: int, high: int) -> int:
        """Unbiased integer in the closed range [low, high]."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        n = high - low + 1
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return low + x % n

    def normal(self, mean: float = 0.0, sigma: float = 1.0) -> float:
        u1 = self.random()
        u2 = self.random()
        return mean + sigma * math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(2.0 * math.pi * u2)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        out = list(range(n))
        self.shuffle(out)
        return out

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    # bulk draws: a block of lanes seeded from this stream, advanced with numpy

    def random_array(self, n: int, lanes: int = 256) -> np.ndarray:
        """``n`` uniform floats in [0, 1) as float64.

        Consumes one u64 from this stream, which seeds ``lanes`` independent
        xoshiro256++ states through splitmix64.
        """
        if n <= 0:
            return np.zeros(0, dtype=np.float64)
        lanes = max(1, min(lanes, n))
        x = self.next_u64()
        seeds = []
        for _ in range(4 * lanes):
            x, out = splitmix64(x)
            seeds.append(out)
        st = np.array(seeds, dtype=np.uint64).reshape(lanes, 4).T.copy()
        s0, s1, s2, s3 = st
        rounds = -(-n // lanes)
        out = np.empty((rounds, lanes), dtype=np.uint64)
        for r in range(rounds):
            out[r] = _rotl_arr(s0 + s3, 23) + s0
            t = s1 << np.uint64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl_arr(s3, 45)
        return (out.ravel()[:n] >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal_array(self, n: int) -> np.ndarray:
        m = -(-n // 2)
        u = self.random_array(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        a = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(a), r * np.sin(a)])[:n]

    def uniform_array(self, n: int, low: float, high: float) -> np.ndarray:
        return low + (high - low) * self.random_array(n)
