"""SplitMix64: a 64-bit-state generator with explicit, portable output rules.

Every derived quantity is pinned down so another implementation can
reproduce the stream bit for bit:

* ``next_u64``: the standard SplitMix64 output function.
* ``uniform``: ``(u64 >> 11) * 2**-53`` in [0, 1).
* ``normal``: Box-Muller on consecutive uniform pairs ``(u1, u2)`` using
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``; one normal per pair.
* ``permutation``: Fisher-Yates from the top, swap index
  ``floor(uniform * (i + 1))``.
* ``split``: child ``k`` is seeded with the k-th ``next_u64`` output.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * GOLDEN
            z = (z ^ (z >> np.uint64(30))) * MIX1
            z = (z ^ (z >> np.uint64(27))) * MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * int(GOLDEN)) & MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def split(self, n: int) -> list[SplitMix64]:
        return [SplitMix64(int(s)) for s in self.next_u64(n)]
