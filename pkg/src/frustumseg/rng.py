"""Deterministic pseudo-random generator used by every seeded code path.

The generator is pinned so that runs are reproducible bit-for-bit across
machines and can be re-implemented from this description alone:

* State: one 64-bit word. A seed is mixed through one SplitMix64 step
  (``z = (seed + 0x9E3779B97F4A7C15); z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
  z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31``). A mixed state of
  zero is replaced by the SplitMix64 constant so xorshift never sticks.
* Stream: xorshift64* — ``s ^= s << 12; s ^= s >> 25; s ^= s << 27;
  output = (s * 0x2545F4914F6CDD1D) mod 2**64``.
* ``uniform()`` takes the top 53 bits of the output over 2**53.
* ``below(n)`` is ``output mod n`` (the small modulo bias is irrelevant at
  the range sizes used here and keeps the rule portable).
* ``normal()`` is Box-Muller on two consecutive uniforms, one deviate per
  pair (the cosine branch; the sine deviate is discarded).

No other entropy source (clock, OS, hash seed) is consulted anywhere.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z = (z + _SPLITMIX_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Xorshift64Star:
    """Seeded xorshift64* stream; see the module docstring for the exact rule."""

    def __init__(self, seed: int):
        state = _splitmix64(seed & _MASK64)
        self._state = state if state != 0 else _SPLITMIX_GAMMA

    def u64(self) -> int:
        s = self._state
        s ^= (s << 12) & _MASK64
        s ^= s >> 25
        s ^= (s << 27) & _MASK64
        self._state = s
        return (s * 0x2545F4914F6CDD1D) & _MASK64

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Integer in [0, n)."""
        if n <= 0:
            raise ValueError("below() needs a positive bound")
        return self.u64() % n

    def choice(self, seq):
        return seq[self.below(len(seq))]

    def coin(self) -> bool:
        """Fair coin; True on uniform() > 0.5."""
        return self.uniform() > 0.5

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        """Gaussian deviate via Box-Muller (cosine branch)."""
        u1 = self.uniform()
        u2 = self.uniform()
        # uniform() can return 0.0 exactly; log needs (0, 1].
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        return mean + std * r * math.cos(2.0 * math.pi * u2)

    def split(self, tag: int) -> "Xorshift64Star":
        """Derive an independent stream for a sub-task without advancing this one."""
        return Xorshift64Star(_splitmix64(self._state ^ (tag & _MASK64)))
