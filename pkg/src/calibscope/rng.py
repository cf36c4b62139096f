"""Seeded random streams shared by every randomized routine in the package.

The generator is a 64-bit linear congruential generator

    state <- (6364136223846793005 * state + 1442695040888963407) mod 2**64

seeded through SplitMix64 so that nearby integer seeds give unrelated
streams. Uniforms take the top 53 bits of each state; normals use the
Box-Muller transform on consecutive pairs of uniforms. Every draw is
vectorized with a jump-ahead table, so a stream of n values costs
O(n) numpy work and O(log n) Python steps.
"""

from __future__ import annotations

import numpy as np

MULTIPLIER = 6364136223846793005
INCREMENT = 1442695040888963407
_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _jump_table(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients (A_k, C_k) with state_k = A_k * state_0 + C_k for k = 1..n."""
    mult = np.array([MULTIPLIER], dtype=np.uint64)
    inc = np.array([INCREMENT], dtype=np.uint64)
    while mult.size < n:
        m = mult.size
        a_m, c_m = mult[-1], inc[-1]
        # uint64 arithmetic wraps modulo 2**64, which is exactly the LCG modulus
        mult = np.concatenate([mult, mult * a_m])
        inc = np.concatenate([inc, mult[:m] * c_m + inc])
    return mult[:n], inc[:n]


class SeededStream:
    """Deterministic stream of uniforms and normals.

    ``stream`` selects an independent sub-stream for the same seed, which is
    how training loops keep their shuffles for different tasks decoupled.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._state = splitmix64((splitmix64(self.seed & _MASK) + self.stream) & _MASK)

    def _advance(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.empty(0, dtype=np.uint64)
        mult, inc = _jump_table(n)
        with np.errstate(over="ignore"):
            states = mult * np.uint64(self._state) + inc
        self._state = int(states[-1])
        return states

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """n floats in [low, high)."""
        u = (self._advance(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = 1.0 - u[0::2], u[1::2]  # u1 in (0, 1] keeps the log finite
        radius = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = radius * np.cos(2.0 * np.pi * u2)
        out[1::2] = radius * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers uniform on [0, high)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, population: np.ndarray, k: int) -> np.ndarray:
        """k distinct elements of ``population`` (without replacement), in draw order."""
        population = np.asarray(population)
        if k > population.size:
            raise ValueError(f"cannot draw {k} items from {population.size} without replacement")
        return population[self.permutation(population.size)[:k]]
