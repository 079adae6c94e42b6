"""xoshiro256** seeded through splitmix64, so scenes reproduce bit-for-bit
in any language that implements the same two generators."""

from __future__ import annotations

import math

MASK = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)


class Xoshiro256:
    def __init__(self, seed: int = 0, state=None):
        if state is not None:
            self.s = [int(x) & MASK for x in state]
        else:
            sm = SplitMix64(seed)
            self.s = [sm.next() for _ in range(4)]
        if not any(self.s):
            raise ValueError("xoshiro256** state must not be all zero")

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK, 7) * 9) & MASK
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, n: int) -> int:
        """Uniform integer in [0, n) by multiply-shift on the top 53 bits."""
        return min(n - 1, int(math.floor(self.random() * n)))
