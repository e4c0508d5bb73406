"""Deterministic random number generation.

Every stochastic choice in this package (parameter init, dropout masks,
batch shuffling, synthetic weather, contrastive pair sampling) draws from a
`Rng` so that a run is a pure function of its seed.  The generator is a
counter-based SplitMix64: the k-th raw output is

    mix64(seed_state + (k + 1) * GOLDEN)

where GOLDEN = 0x9E3779B97F4A7C15 and mix64 is the xorshift-multiply
finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

Uniform doubles take the top 53 bits: (z >> 11) * 2**-53.  Because outputs
are a pure function of (seed_state, counter), blocks of any size can be
produced with vectorized uint64 arithmetic, and the stream is reproducible
bit-for-bit on any platform with IEEE-754 doubles.

Named substreams come from `spawn(label)`, which derives a child seed by
mixing the parent seed with an FNV-1a hash of the label.  Spawning never
advances the parent stream.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_U53_INV = 2.0 ** -53


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # uint64 wraparound is the point
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _fnv1a(data: bytes) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in data:
            h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


class Rng:
    """Seeded deterministic generator with independent named substreams."""

    def __init__(self, seed: int):
        # mix the raw seed once so nearby user seeds give unrelated streams
        self._seed = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        self._counter = np.uint64(0)

    def spawn(self, label: str) -> "Rng":
        """Derive an independent child stream addressed by `label`.

        The same (parent seed, label) pair always yields the same child;
        the parent's own stream position is unaffected.
        """
        child = Rng.__new__(Rng)
        child._seed = _mix64(self._seed ^ _fnv1a(label.encode("utf-8")))
        child._counter = np.uint64(0)
        return child

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            ks = self._seed + (
                np.arange(1, n + 1, dtype=np.uint64) + self._counter
            ) * GOLDEN
            self._counter += np.uint64(n)
        return _mix64(ks)

    def uniform(self, shape=None) -> "float | np.ndarray":
        """Uniform doubles in [0, 1)."""
        if shape is None:
            return float(self._raw(1)[0] >> np.uint64(11)) * _U53_INV
        n = int(np.prod(shape))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _U53_INV
        return u.reshape(shape)

    def uniform_range(self, low: float, high: float, shape=None):
        return low + (high - low) * self.uniform(shape)

    def normal(self, shape=None, std: float = 1.0, mean: float = 0.0):
        """Gaussian draws via Box-Muller on open-interval uniforms."""
        scalar = shape is None
        n = 1 if scalar else int(np.prod(shape))
        half = (n + 1) // 2
        # u1 in (0, 1] so log(u1) is finite
        u1 = ((self._raw(half) >> np.uint64(11)).astype(np.float64) + 1.0) * _U53_INV
        u2 = (self._raw(half) >> np.uint64(11)).astype(np.float64) * _U53_INV
        r = np.sqrt(-2.0 * np.log(u1))
        g = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        g = mean + std * g
        if scalar:
            return float(g[0])
        return g.reshape(shape)

    def integers(self, n: int, size=None):
        """Integers uniform on [0, n).  Bias is O(n / 2**53), negligible here."""
        if n <= 0:
            raise ValueError("integers() requires n >= 1")
        u = self.uniform(size if size is not None else None)
        if size is None:
            return min(int(u * n), n - 1)
        return np.minimum((u * n).astype(np.int64), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting uniform keys."""
        keys = self.uniform((n,))
        return np.argsort(keys, kind="stable")

    def choice(self, pool, k: int) -> list:
        """k distinct elements of `pool` (k <= len(pool))."""
        idx = self.permutation(len(pool))[:k]
        return [pool[i] for i in idx]
