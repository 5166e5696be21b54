"""Seeded random streams with a documented seed-mixing rule."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One SplitMix64 output step applied to ``x`` (64-bit wraparound)."""
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_seed(seed: int, *keys: int) -> int:
    """Derive a child seed from ``seed`` and integer ``keys``.

    The child is ``splitmix64(acc ^ key)`` folded left over the keys, starting
    from ``acc = splitmix64(seed)``. Used for per-patient and per-image seeds.
    """
    acc = splitmix64(seed & _MASK64)
    for k in keys:
        acc = splitmix64(acc ^ (k & _MASK64))
    return acc


class RngStream:
    """A PCG64 stream that counts how many values it has handed out.

    PCG64 output is specified bit-for-bit, so a given seed yields the same
    draws on every platform numpy supports.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.draws = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, draws={self.draws})"

    def child(self, *keys: int) -> "RngStream":
        """Independent stream keyed on this stream's seed (not its position)."""
        return RngStream(mix_seed(self.seed, *keys))

    def _count(self, size) -> None:
        self.draws += int(np.prod(size)) if size is not None else 1

    def normal(self, size=None, dtype=np.float64):
        self._count(size)
        out = self._gen.standard_normal(size)
        return np.asarray(out, dtype=dtype) if size is not None else float(out)

    def uniform(self, low=0.0, high=1.0, size=None):
        self._count(size)
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self._count(size)
        return self._gen.integers(low, high, size)

    def poisson(self, lam, size=None):
        self._count(size)
        return self._gen.poisson(lam, size)

    def permutation(self, n: int) -> np.ndarray:
        self._count(n)
        return self._gen.permutation(n)

    def keep_mask(self, shape, rate: float) -> np.ndarray:
        """Boolean mask where each entry survives with probability ``1 - rate``."""
        self._count(shape)
        return self._gen.random(shape) >= rate
