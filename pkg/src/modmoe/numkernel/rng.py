"""Counter-based splitmix64 generator.

Every random draw in the package flows from here so that a root seed fully
determines corpus, initialisation and batch order. The stream is defined by
the algorithm alone (no platform RNG), so it can be reproduced elsewhere.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(x: int) -> int:
    """Scalar finaliser, used for deriving child seeds."""
    with np.errstate(over="ignore"):
        return int(_mix(np.array([x & _MASK], dtype=np.uint64))[0])


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


def derive_seed(seed: int, *labels: str | int) -> int:
    """Child seed from a parent seed and a path of labels."""
    s = seed & _MASK
    for label in labels:
        s = splitmix64(s ^ fnv1a64(str(label)))
    return s


class SplitMix:
    """Stateful view over the stream ``mix(seed + k * gamma)``, k = 1, 2, ..."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + k * _GAMMA)

    def uniform(self, size: int | tuple[int, ...] = ()) -> np.ndarray:
        """Floats in [0, 1) with 53 random bits."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape) if shape else u[0]

    def normal(self, size: int | tuple[int, ...] = ()) -> np.ndarray:
        """Standard normals via Box-Muller (one pair of uniforms per value)."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform(2 * n).reshape(2, n)
        z = np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1])
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, size: int | None = None):
        """Uniform integers in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        n = 1 if size is None else size
        vals = (self.next_u64(n) % np.uint64(span)).astype(np.int64) + low
        return int(vals[0]) if size is None else vals

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by the stream, so the order is platform independent
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.next_u64(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]
