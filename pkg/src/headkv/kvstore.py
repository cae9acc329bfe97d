"""Per-head KV caches that keep original token positions, plus entry accounting."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .errors import HeadKVError


class HeadId(NamedTuple):
    layer: int
    head: int

    def label(self) -> str:
        return f"L{self.layer}H{self.head}"


def head_ids(n_layers: int, n_heads: int) -> list[HeadId]:
    return [HeadId(l, h) for l in range(n_layers) for h in range(n_heads)]


@dataclass(frozen=True)
class HeadCache:
    """Retained key/value rows of one head; ``positions`` are original token indices."""

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        s = len(self.positions)
        if self.keys.shape[0] != s or self.values.shape[0] != s:
            raise HeadKVError("keys, values and positions disagree on length")
        if s > 1 and np.any(np.diff(self.positions) <= 0):
            raise HeadKVError("cache positions must be strictly increasing")

    @classmethod
    def from_full(cls, keys, values) -> "HeadCache":
        keys = np.ascontiguousarray(keys, dtype=np.float64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        return cls(keys, values, np.arange(keys.shape[0], dtype=np.int64))

    @classmethod
    def positions_only(cls, n: int) -> "HeadCache":
        """A cache with zero-width rows, for attention sources that have no K/V tensors."""
        return cls(np.zeros((n, 0)), np.zeros((n, 0)), np.arange(n, dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self.positions)

    @property
    def d_head(self) -> int:
        return self.keys.shape[1]


def evict_to(cache: HeadCache, retained, *, presorted: bool = False) -> HeadCache:
    """Keep only the rows at ``retained`` (indices into the cache), in original order.

    ``presorted`` skips deduplication when the caller guarantees strictly
    increasing in-range int64 indices.
    """
    if presorted:
        idx = retained
    elif isinstance(retained, np.ndarray):
        idx = np.unique(retained.astype(np.int64, copy=False))
    else:
        idx = np.unique(np.fromiter(retained, dtype=np.int64))
    if not presorted and idx.size and (idx[0] < 0 or idx[-1] >= cache.size):
        raise HeadKVError(f"retained index out of range for cache of size {cache.size}")
    return HeadCache(
        np.ascontiguousarray(cache.keys[idx]),
        np.ascontiguousarray(cache.values[idx]),
        cache.positions[idx].copy(),
    )


def append(cache: HeadCache, key_row, value_row, position: int) -> HeadCache:
    if cache.size and position <= cache.positions[-1]:
        raise HeadKVError(f"append position {position} not after last position {cache.positions[-1]}")
    key_row = np.asarray(key_row, dtype=np.float64).reshape(1, -1)
    value_row = np.asarray(value_row, dtype=np.float64).reshape(1, -1)
    if cache.size == 0:
        return HeadCache(key_row, value_row, np.array([position], dtype=np.int64))
    return HeadCache(
        np.concatenate([cache.keys, key_row]),
        np.concatenate([cache.values, value_row]),
        np.append(cache.positions, np.int64(position)),
    )


@dataclass(frozen=True)
class CacheReport:
    per_head_entries: dict[HeadId, int]
    full_entries: int
    alpha: int = 0
    per_head_ratio: dict[HeadId, float] = field(default_factory=dict)

    @property
    def total_entries(self) -> int:
        return sum(self.per_head_entries.values())

    @property
    def budget_entries(self) -> int:
        """Entries excluding the protected window of each head."""
        return sum(max(e - self.alpha, 0) for e in self.per_head_entries.values())

    @property
    def compression_ratio(self) -> float:
        return self.total_entries / self.full_entries if self.full_entries else 0.0

    def bytes(self, d_head: int) -> int:
        # keys + values, float64
        return self.total_entries * 2 * d_head * 8

    def to_dict(self) -> dict:
        return {
            "per_head_entries": {h.label(): e for h, e in self.per_head_entries.items()},
            "total_entries": self.total_entries,
            "budget_entries": self.budget_entries,
            "full_entries": self.full_entries,
            "alpha": self.alpha,
            "compression_ratio": self.compression_ratio,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["headId", "entries"])
        for h, e in self.per_head_entries.items():
            w.writerow([h.label(), e])
        return buf.getvalue()


def memory_report(caches: Mapping[HeadId, HeadCache], full_n: int, alpha: int = 0) -> CacheReport:
    entries = {h: c.size for h, c in caches.items()}
    if any(e > full_n for e in entries.values()):
        raise HeadKVError("a cache holds more entries than the full sequence")
    ratio = {h: (e / full_n if full_n else 0.0) for h, e in entries.items()}
    return CacheReport(entries, full_n * len(entries), alpha, ratio)
