"""Deterministic seeding helpers shared across the package.

Two primitives:

* ``SplitMix64`` -- a tiny, fully specified 64-bit PRNG used where the result
  must be reproducible across implementations (corpus splits).
* ``derive_rng`` -- builds an independent numpy Generator from a tuple of
  integer parts (seed, epoch, batch, ...) so nested loops get decoupled,
  replayable streams.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 PRNG (Steele et al. variant with the standard constants)."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling (unbiased)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            v = self.next_u64()
            if v <= limit:
                return v % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_rng(*parts: int) -> np.random.Generator:
    """Generator seeded from an integer tuple; negative parts are wrapped."""
    return np.random.default_rng([int(p) & _MASK64 for p in parts])


def mix(*parts: int) -> int:
    """Collapse an integer tuple into one well-mixed 64-bit seed."""
    state = 0x243F6A8885A308D3
    for p in parts:
        sm = SplitMix64(state ^ (int(p) & _MASK64))
        state = sm.next_u64()
    return state
