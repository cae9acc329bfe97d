"""Per-head importance scores from attention traces.

Three estimators share one output shape, an (L, H) array of per-example scores:

* ``R``: retrieval score. A head earns 1/N at a step when its argmax position
  lies inside the needle and the token there is the token being emitted.
* ``R2``: retrieval-reasoning score. At each step, the head's top-N positions
  that fall in the correct-answer span contribute their attention value / N.
* ``ER``: the R2 rule applied to a plain retrieval needle.

Span membership is decided by original token position, never by token identity.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import HeadKVError
from .kvstore import HeadId, head_ids
from .numkit import top_k_indices
from .probes import Span
from .toymodel.trace import AttentionTrace

ESTIMATORS = ("R", "ER", "R2")


def _check_steps(trace: AttentionTrace, n: int) -> None:
    if len(trace) != n:
        raise HeadKVError(f"trace has {len(trace)} steps, expected {n}")


def score_retrieval(trace: AttentionTrace, needle_span: Span, target, context) -> np.ndarray:
    target = np.asarray(target)
    context = np.asarray(context)
    N = len(target)
    _check_steps(trace, N)
    scores = np.zeros(trace.shape)
    for step in trace.steps:
        for h, a in step.attention.items():
            # np.argmax returns the first maximum, i.e. lowest index on ties
            pos = int(step.positions[h][int(np.argmax(a))])
            if pos in needle_span and context[pos] == step.emitted_token:
                scores[h] += 1.0 / N
    return scores


def top_n_mask(a: np.ndarray, n: int) -> np.ndarray:
    """Boolean mask of each row's ``n`` largest entries, ties to the lower index.

    Same selection as :func:`headkv.numkit.top_k_indices` row by row, in O(width).
    """
    a = np.atleast_2d(a)
    n = min(n, a.shape[1])
    kth = -np.partition(-a, n - 1, axis=1)[:, n - 1:n]
    above = a > kth
    tied = a == kth
    need = n - above.sum(axis=1, keepdims=True)
    if np.all(tied.sum(axis=1, keepdims=True) == need):
        return above | tied
    return above | (tied & (np.cumsum(tied, axis=1) <= need))


def score_r2(trace: AttentionTrace, correct_span: Span) -> np.ndarray:
    N = len(correct_span)
    if N < 1:
        raise HeadKVError("correct span must be non-empty")
    _check_steps(trace, N)
    L, H = trace.shape
    heads = head_ids(L, H)
    scores = np.zeros(L * H)
    for step in trace.steps:
        lengths = {len(step.attention[h]) for h in heads}
        if len(lengths) == 1:
            a = np.stack([step.attention[h] for h in heads])
            pos = np.stack([step.positions[h] for h in heads])
            scores += (a * (top_n_mask(a, N) & correct_span.mask(pos))).sum(axis=1) / N
            continue
        for i, h in enumerate(heads):
            a = step.attention[h][None, :]
            hit = top_n_mask(a, N) & correct_span.mask(step.positions[h][None, :])
            scores[i] += (a * hit).sum() / N
    return scores.reshape(L, H)


def score_enhanced_retrieval(trace: AttentionTrace, needle_span: Span) -> np.ndarray:
    return score_r2(trace, needle_span)


@dataclass(frozen=True)
class ImportanceScores:
    raw: np.ndarray
    normalized: np.ndarray
    estimator_tag: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape

    @classmethod
    def from_raw(cls, raw, tag: str = "R2") -> "ImportanceScores":
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2:
            raise HeadKVError("raw scores must be an (L, H) array")
        if np.any(raw < 0):
            raise HeadKVError("raw scores must be non-negative")
        total = raw.sum()
        norm = raw / total if total > 0 else np.full(raw.shape, 1.0 / raw.size)
        return cls(raw, norm, tag)

    def get(self, h: HeadId) -> float:
        return float(self.normalized[h])

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "estimator_tag": self.estimator_tag,
            "raw": self.raw.tolist(),
            "normalized": self.normalized.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceScores":
        raw = np.asarray(d["raw"], dtype=np.float64)
        norm = np.asarray(d["normalized"], dtype=np.float64)
        if raw.shape != tuple(d["shape"]) or norm.shape != raw.shape:
            raise HeadKVError("score arrays do not match declared shape")
        return cls(raw, norm, d["estimator_tag"])

    def heatmap_csv(self) -> str:
        return matrix_csv(self.normalized)


def matrix_csv(m: np.ndarray, fmt: str = "{:.12g}") -> str:
    """L rows by H columns, no header."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(m):
        w.writerow([fmt.format(x) for x in row])
    return buf.getvalue()


def aggregate(per_example: Sequence[np.ndarray], tag: str = "R2") -> ImportanceScores:
    """Unweighted mean over examples, then normalise to a distribution."""
    if len(per_example) == 0:
        raise HeadKVError("nothing to aggregate")
    shape = np.shape(per_example[0])
    if any(np.shape(s) != shape for s in per_example):
        raise HeadKVError("per-example score shapes differ")
    return ImportanceScores.from_raw(np.mean(np.stack(per_example), axis=0), tag)


def distribution_stats(a: ImportanceScores, b: ImportanceScores, k: int) -> tuple[float, float, float]:
    """Zero fractions of both distributions and the overlap of their top-k heads."""
    if a.shape != b.shape:
        raise HeadKVError("score shapes differ")
    n = a.raw.size
    if k > n or k < 1:
        raise HeadKVError(f"k={k} must lie in [1, {n}]")
    zero_a = float(np.count_nonzero(a.raw == 0)) / n
    zero_b = float(np.count_nonzero(b.raw == 0)) / n
    top_a = set(top_k_indices(a.normalized.ravel(), k).tolist())
    top_b = set(top_k_indices(b.normalized.ravel(), k).tolist())
    return zero_a, zero_b, len(top_a & top_b) / k


def score_trace(estimator: str, trace: AttentionTrace, example) -> np.ndarray:
    """Dispatch on estimator tag for a NeedleExample."""
    if estimator == "R":
        return score_retrieval(trace, example.needle_span, example.target, example.prompt)
    if estimator == "ER":
        return score_enhanced_retrieval(trace, example.needle_span)
    if estimator == "R2":
        return score_r2(trace, example.correct_span)
    raise HeadKVError(f"unknown estimator {estimator!r}")


__all__ = [
    "ESTIMATORS", "ImportanceScores", "aggregate", "distribution_stats", "head_ids",
    "matrix_csv", "score_enhanced_retrieval", "score_r2", "score_retrieval", "score_trace",
]
