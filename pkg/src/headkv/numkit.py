"""Small deterministic numeric helpers shared across the package.

Matrices are plain ``float64`` numpy arrays. Randomness comes from
:class:`SeededRng`, a counter-based SplitMix64 stream whose update equations are
fixed here so that streams can be reproduced outside numpy:

    z_i  = seed + (i + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z_i ^= z_i >> 30;  z_i *= 0xBF58476D1CE4E5B9
    z_i ^= z_i >> 27;  z_i *= 0x94D049BB133111EB
    z_i ^= z_i >> 31

``i`` is the running draw counter. Uniform doubles are ``(z >> 11) * 2**-53``.
"""
from __future__ import annotations

import numpy as np

from .errors import HeadKVError

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix_scalar(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed, giving an independent 64-bit stream id."""
    s = _mix_scalar(seed + GOLDEN)
    for k in keys:
        s = _mix_scalar(s ^ _mix_scalar((int(k) & MASK64) + GOLDEN))
    return s


class SeededRng:
    """SplitMix64 stream. Same seed gives the same sequence on any platform."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def next_u64(self, size: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        self.counter += size
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, size: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Integers in ``[low, high)``."""
        if high <= low:
            raise HeadKVError(f"empty integer range [{low}, {high})")
        u = self.uniform(size)
        return low + np.floor(u * (high - low)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def sample(self, population: int, k: int) -> np.ndarray:
        """``k`` distinct values from ``range(population)``, in draw order."""
        if k > population:
            raise HeadKVError(f"cannot draw {k} distinct values from {population}")
        return self.permutation(population)[:k]

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *keys))


def softmax(v) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    x = np.asarray(v, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise HeadKVError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise HeadKVError("softmax input must be finite")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over entries where ``mask`` is True; masked entries come out as exact zeros."""
    x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def top_k_indices(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, largest first, ties to the lower index."""
    x = np.asarray(v, dtype=np.float64)
    if k > x.shape[0]:
        raise HeadKVError(f"k={k} exceeds vector length {x.shape[0]}")
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    return np.argsort(-x, kind="stable")[:k]


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise HeadKVError(f"matmul shape mismatch {a.shape} x {b.shape}")
    return a @ b


def largest_remainder(targets, total: int, priority=None) -> np.ndarray:
    """Round non-negative real targets to integers summing exactly to ``total``.

    Every entry gets its floor, then the leftover units go one each to the largest
    fractional parts. Equal remainders are ordered by ``priority`` (higher first),
    then by flat index. Targets are snapped to 1e-9 first so that float noise in
    the last ulp cannot flip a floor or a remainder tie.
    """
    t = np.round(np.asarray(targets, dtype=np.float64).ravel(), 9)
    if np.any(t < 0):
        raise HeadKVError("largest_remainder needs non-negative targets")
    floors = np.floor(t).astype(np.int64)
    extra = int(total) - int(floors.sum())
    if extra < 0 or extra > t.size:
        raise HeadKVError(f"targets sum {t.sum():.6f} incompatible with total {total}")
    rem = t - floors
    pri = np.zeros_like(t) if priority is None else np.asarray(priority, dtype=np.float64).ravel()
    # lexsort sorts by the last key first
    order = np.lexsort((np.arange(t.size), -pri, -rem))
    floors[order[:extra]] += 1
    return floors.reshape(np.shape(targets))
