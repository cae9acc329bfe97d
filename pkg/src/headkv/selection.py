"""Choose which cache rows each head keeps, given its budget.

The last ``alpha`` prompt positions form the observation window: their attention
to earlier positions is summed, smoothed with a 1-D pooling filter and ranked.
A head keeps its top-``budget`` earlier positions plus the whole window.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .allocation import BudgetPlan
from .errors import HeadKVError
from .kvstore import CacheReport, HeadCache, HeadId, evict_to, memory_report
from .numkit import top_k_indices


@dataclass(frozen=True)
class PoolingConfig:
    alpha: int = 8
    kernel: int = 7
    mode: str = "max"

    def __post_init__(self):
        if self.alpha < 1:
            raise HeadKVError("alpha must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise HeadKVError("pooling kernel must be odd and >= 1")
        if self.mode not in ("max", "mean"):
            raise HeadKVError(f"unknown pooling mode {self.mode!r}")


def pool1d(x: np.ndarray, kernel: int, mode: str = "max") -> np.ndarray:
    """Sliding max/mean with windows clamped at the edges (no padding values)."""
    x = np.asarray(x, dtype=np.float64)
    n, r = len(x), kernel // 2
    if r == 0 or n == 0:
        return x.copy()
    if mode == "max":
        padded = np.concatenate([np.full(r, -np.inf), x, np.full(r, -np.inf)])
        return np.lib.stride_tricks.sliding_window_view(padded, kernel).max(axis=1)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    lo = np.clip(np.arange(n) - r, 0, n)
    hi = np.clip(np.arange(n) + r + 1, 0, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def pooled_scores(attention: np.ndarray, cfg: PoolingConfig) -> np.ndarray:
    """Pooled observation score for every position in ``[0, n - alpha)``.

    ``attention`` holds at least the last ``alpha`` query rows of a head's
    prefill attention, each of length n.
    """
    a = np.asarray(attention, dtype=np.float64)
    n = a.shape[1]
    if n <= cfg.alpha:
        raise HeadKVError(f"sequence length {n} must exceed alpha={cfg.alpha}")
    if a.shape[0] < cfg.alpha:
        raise HeadKVError("fewer attention rows than the observation window")
    raw = a[-cfg.alpha:, : n - cfg.alpha].sum(axis=0)
    return pool1d(raw, cfg.kernel, cfg.mode)


def ranked_positions(scores: np.ndarray) -> np.ndarray:
    """All positions, best score first, ties to the lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def select_retained(scores: np.ndarray, budget: int, alpha: int, n: int,
                    ranking: np.ndarray | None = None) -> np.ndarray:
    """Sorted positions: top-``budget`` of ``[0, n - alpha)`` by score, plus the last ``alpha``.

    ``ranking`` is an optional precomputed :func:`ranked_positions` of ``scores``.
    """
    if budget < 0 or budget + alpha > n:
        raise HeadKVError(f"budget {budget} + alpha {alpha} exceeds sequence length {n}")
    scores = np.asarray(scores)
    if len(scores) != n - alpha:
        raise HeadKVError(f"expected {n - alpha} scores, got {len(scores)}")
    top = top_k_indices(scores, budget) if ranking is None else ranking[:budget]
    return np.concatenate([np.sort(top), np.arange(n - alpha, n)]).astype(np.int64)


def compress(caches: Mapping[HeadId, HeadCache], attention: Mapping[HeadId, np.ndarray],
             plan: BudgetPlan, cfg: PoolingConfig, scores: Mapping[HeadId, np.ndarray] | None = None,
             ranking: Mapping[HeadId, np.ndarray] | None = None
             ) -> tuple[dict[HeadId, HeadCache], CacheReport, dict[HeadId, np.ndarray]]:
    """Evict every head down to ``plan[h] + alpha`` rows.

    ``plan`` must already be clamped to this sequence. Pass ``scores`` to reuse
    pooled scores computed once per example. Returns the compressed caches,
    the memory report and the retained positions per head.
    """
    if plan.alpha != cfg.alpha:
        raise HeadKVError(f"plan alpha {plan.alpha} != pooling alpha {cfg.alpha}")
    out, kept = {}, {}
    n = None
    for h, cache in caches.items():
        n = cache.size
        s = scores[h] if scores is not None else pooled_scores(attention[h], cfg)
        idx = select_retained(s, int(plan.per_head[h]), cfg.alpha, n,
                              None if ranking is None else ranking[h])
        out[h] = evict_to(cache, idx, presorted=True)
        kept[h] = out[h].positions
    return out, memory_report(out, n or 0, cfg.alpha), kept


def retained_json(kept: Mapping[HeadId, np.ndarray]) -> str:
    return json.dumps({h.label(): v.tolist() for h, v in kept.items()}, indent=1)
