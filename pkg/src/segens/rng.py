"""Seeded 64-bit splitmix generator for reproducible parameter initialization.

Weights must be bit-identical across runs and machines for a given seed, so
parameter init goes through this fixed-arithmetic generator rather than a
library RNG whose stream layout may change between versions.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based splitmix64 stream; ``uniform`` draws are vectorized."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def next_u64(self, n: int = 1) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix(self._seed + idx * _GAMMA)

    def uniform(self, lo: float, hi: float, shape, dtype=np.float32) -> np.ndarray:
        shape = tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        # top 53 bits -> [0, 1) double, then scaled
        u = (self.next_u64(n) >> np.uint64(11)) * (2.0 ** -53)
        return (lo + (hi - lo) * u).reshape(shape).astype(dtype)

    def derive(self, offset: int) -> "SplitMix64":
        """Independent child stream, e.g. one per image index."""
        with np.errstate(over="ignore"):
            child = _mix(self._seed + np.uint64(offset + 1) * _MIX2)
        return SplitMix64(int(child))


def he_uniform(rng: SplitMix64, fan_in: int, shape, dtype=np.float32) -> np.ndarray:
    limit = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-limit, limit, shape, dtype=dtype)
