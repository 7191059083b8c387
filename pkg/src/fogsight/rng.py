"""Seedable counter-based RNG (splitmix64) used for all randomness.

Weight init, augmentation decisions and dropout masks all draw from this
generator so results are bitwise reproducible across platforms.  Streams
are derived by key (``rng.derive("dropout", step, layer)``) rather than by
consuming shared state, which makes training resumable from a step count
alone.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # vectorized _mix; uint64 arithmetic wraps, which is what we want
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _hash_key(key) -> int:
    if isinstance(key, str):
        h = _FNV_OFFSET
        for b in key.encode("utf-8"):
            h = ((h ^ b) * _FNV_PRIME) & _MASK
        return h
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK
    raise TypeError(f"rng keys must be str or int, got {type(key).__name__}")


class SplitMix64:
    """splitmix64 stream: state advances by a golden-ratio increment."""

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK

    def derive(self, *keys) -> "SplitMix64":
        """Child generator keyed off this one; does not consume state."""
        s = self._state
        for k in keys:
            s = _mix(s ^ _hash_key(k))
        return SplitMix64(_mix(s ^ _GOLDEN))

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        """Doubles in [low, high) from the top 53 bits of each draw."""
        if shape is None:
            u = self.next_u64()
            return low + (high - low) * ((u >> 11) * 2.0**-53)
        n = int(np.prod(shape)) if np.ndim(shape) or isinstance(shape, (tuple, list)) else int(shape)
        idx = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN) + np.uint64(self._state)
        self._state = (self._state + n * _GOLDEN) & _MASK
        u = _mix_array(idx)
        vals = (u >> np.uint64(11)).astype(np.float64) * 2.0**-53
        vals = low + (high - low) * vals
        return vals.reshape(shape) if isinstance(shape, (tuple, list)) else vals

    def normal(self, shape, mean: float = 0.0, std: float = 1.0):
        """Box-Muller from two uniform draws per value."""
        n = int(np.prod(shape))
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        u1 = np.maximum(u1, 2.0**-53)  # keep log finite
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (mean + std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via random sort keys."""
        keys = self.uniform(int(n))
        return np.argsort(keys, kind="stable")

    def bernoulli(self, shape, p: float) -> np.ndarray:
        """Boolean array, True with probability p."""
        return self.uniform(shape) < p
