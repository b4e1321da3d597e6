"""Documented 64-bit pseudo random generator.

Every seeded decision that must be reproducible by hand (weight init,
mini-batch order, label permutations) goes through :class:`Rng`.

Algorithm
---------
State seeding uses SplitMix64::

    z = (s := s + 0x9E3779B97F4A7C15)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Four successive SplitMix64 outputs from ``seed`` form the xoshiro256**
state ``s0..s3``. Each draw is::

    result = rotl(s1 * 5, 7) * 9
    t = s1 << 17
    s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
    s2 ^= t; s3 = rotl(s3, 45)

All arithmetic is modulo 2**64. Derived quantities:

* ``uniform()``  = ``(next_u64() >> 11) * 2**-53``, in [0, 1)
* ``normal()``   = ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` with two fresh
  uniforms (the sine branch is discarded)
* ``below(n)``   = rejection sampling: draw ``r`` until
  ``r < 2**64 - (2**64 mod n)``, return ``r mod n``
* ``permutation(n)`` = Fisher-Yates on ``[0..n)``: for ``i`` from ``n-1``
  down to 1, swap ``i`` with ``below(i + 1)``
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256** seeded through SplitMix64."""

    def __init__(self, seed: int):
        sm = int(seed) & MASK64
        state = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            state.append(out)
        self._s = state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)], dtype=np.float64)

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("below() needs a positive bound")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def permutation(self, n: int) -> np.ndarray:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def shuffled(self, items) -> list:
        items = list(items)
        return [items[k] for k in self.permutation(len(items))]

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """First ``k`` entries of a Fisher-Yates permutation of ``range(n)``."""
        return self.permutation(n)[:k]

    def numpy_generator(self) -> np.random.Generator:
        """Bulk-noise generator keyed off this stream (one draw consumed)."""
        return np.random.Generator(np.random.PCG64(self.next_u64()))


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 64-bit sub-seed from a master seed and JSON-able parts."""
    payload = json.dumps([int(master_seed), *parts], sort_keys=True, default=str)
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
