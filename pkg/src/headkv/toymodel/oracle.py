"""Planted-oracle attention: a stand-in for a pretrained model with known important heads.

A planted head with weight ``w`` sends mass ``w`` to the span it is asked to copy
and ``1 - w`` to the rest of the prompt. Every other head attends roughly
uniformly. Noise is keyed by (noise_seed, example_key, step, head), so two
specs that differ only in their weights see identical noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import HeadKVError
from ..kvstore import HeadId, head_ids
from ..numkit import SeededRng, derive_seed
from ..probes import NOISE_TOKEN, Span
from .trace import AttentionTrace, StepRecord

_PREFILL_KEY = 1 << 40


@dataclass(frozen=True)
class PlantedOracleSpec:
    model_shape: tuple[int, int]
    planted: Mapping[HeadId, float] = field(default_factory=dict)
    noise_seed: int = 0
    noise_amplitude: float = 0.5

    def __post_init__(self):
        L, H = self.model_shape
        for h, w in self.planted.items():
            if not (0 <= h[0] < L and 0 <= h[1] < H):
                raise HeadKVError(f"planted head {h} outside shape {self.model_shape}")
            if not 0.0 <= w <= 1.0:
                raise HeadKVError(f"plant weight {w} outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.model_shape)

    def weight_matrix(self) -> np.ndarray:
        w = np.zeros(self.shape)
        for h, v in self.planted.items():
            w[h] = v
        return w

    def to_dict(self) -> dict:
        return {
            "kind": "oracle",
            "model_shape": list(self.model_shape),
            "planted": [[h[0], h[1], w] for h, w in sorted(self.planted.items())],
            "noise_seed": self.noise_seed,
            "noise_amplitude": self.noise_amplitude,
        }


def planted_oracle(n_layers: int, n_heads: int, fraction: float = 0.2, weight: float = 0.9,
                   seed: int = 0, noise_seed: int | None = None) -> PlantedOracleSpec:
    """Plant ``round(fraction * L * H)`` heads, chosen by ``seed``, all at ``weight``."""
    heads = head_ids(n_layers, n_heads)
    k = int(round(fraction * len(heads)))
    chosen = SeededRng(seed).sample(len(heads), k)
    planted = {heads[i]: float(weight) for i in sorted(chosen.tolist())}
    return PlantedOracleSpec((n_layers, n_heads), planted,
                             seed if noise_seed is None else noise_seed)


def _noisy_uniform(spec: PlantedOracleSpec, key: int, n: int) -> np.ndarray:
    """(L*H, n) rows of ``1 + amplitude * u`` with u in [0, 1); unnormalised."""
    L, H = spec.shape
    u = SeededRng(derive_seed(spec.noise_seed, key)).uniform(L * H * n)
    return 1.0 + spec.noise_amplitude * u.reshape(L * H, n)


def _planted_row(w: float, noise: np.ndarray, span_mask: np.ndarray, focus: int | None,
                 span_len: int) -> np.ndarray:
    row = np.zeros_like(noise)
    off = ~span_mask
    if off.any():
        row[off] = (1.0 - w) * noise[off] / noise[off].sum()
    if focus is None or span_len == 1:
        row[span_mask] += w / span_len
    else:
        row[span_mask] += 0.2 * w / (span_len - 1)
        row[focus] = 0.8 * w
    if not off.any():
        row /= row.sum()
    return row


def oracle_attention(spec: PlantedOracleSpec, n: int, span: Span, focus: int | None,
                     key: int) -> np.ndarray:
    """Attention rows (L*H, n) over positions ``0..n-1`` for one query."""
    noise = _noisy_uniform(spec, key, n)
    rows = noise / noise.sum(axis=1, keepdims=True)
    mask = span.mask(np.arange(n))
    L, H = spec.shape
    for h, w in spec.planted.items():
        i = h[0] * H + h[1]
        rows[i] = _planted_row(w, noise[i], mask, focus, len(span))
    return rows


def oracle_trace(spec: PlantedOracleSpec, prompt, target_span: Span, *,
                 retained: Mapping[HeadId, np.ndarray] | None = None,
                 example_key: int = 0) -> AttentionTrace:
    """Attention trace for copying ``prompt[target_span]``, one step per span token.

    ``retained`` restricts each head to its cached positions; attention is then
    renormalised over what is left, like a softmax over a compressed cache.
    Emitted tokens follow :func:`oracle_emit`; a failed step emits ``NOISE_TOKEN``.
    """
    prompt = np.asarray(prompt)
    n = len(prompt)
    if len(target_span) == 0 or target_span.start < 0 or target_span.stop > n:
        raise HeadKVError(f"target span {tuple(target_span)} outside prompt of length {n}")
    L, H = spec.shape
    heads = head_ids(L, H)
    all_pos = np.arange(n, dtype=np.int64)
    trace = AttentionTrace((L, H))
    emitted = oracle_emit(spec, prompt, target_span, retained)
    for t in range(len(target_span)):
        focus = target_span.start + t
        rows = oracle_attention(spec, n, target_span, focus,
                                derive_seed(example_key, t))
        attention, positions = {}, {}
        for i, h in enumerate(heads):
            if retained is None:
                attention[h], positions[h] = rows[i], all_pos
                continue
            pos = np.asarray(retained[h], dtype=np.int64)
            a = rows[i][pos]
            s = a.sum()
            attention[h] = a / s if s > 0 else np.full(len(pos), 1.0 / len(pos))
            positions[h] = pos
        token = emitted[t]
        trace.steps.append(StepRecord(token, attention, positions, token))
    return trace


def oracle_emit(spec: PlantedOracleSpec, prompt, target_span: Span,
                retained: Mapping[HeadId, np.ndarray] | None = None) -> list[int]:
    """Tokens the oracle emits while copying ``target_span``.

    Step t is correct iff the mean plant weight over planted heads is >= 0.5,
    where a head that lost position ``target_span.start + t`` counts as 0.
    """
    prompt = np.asarray(prompt)
    out = []
    for focus in range(target_span.start, target_span.stop):
        eff = [w if retained is None or np.any(retained[h] == focus) else 0.0
               for h, w in spec.planted.items()]
        correct = bool(eff) and float(np.mean(eff)) >= 0.5
        out.append(int(prompt[focus]) if correct else NOISE_TOKEN)
    return out


def oracle_prefill_attention(spec: PlantedOracleSpec, n: int, focus_positions, alpha: int,
                             example_key: int = 0) -> dict[HeadId, np.ndarray]:
    """Causal attention rows of the last ``alpha`` queries, shape (alpha, n) per head.

    Planted heads spread their weight evenly over ``focus_positions`` (the
    material the question is about); everything else is noisy-uniform over the
    causal prefix.
    """
    if alpha < 1 or alpha > n:
        raise HeadKVError(f"alpha={alpha} must lie in [1, {n}]")
    L, H = spec.shape
    focus_mask = np.zeros(n, dtype=bool)
    focus_mask[np.asarray(list(focus_positions), dtype=np.int64)] = True
    out = np.zeros((L * H, alpha, n))
    for r in range(alpha):
        q = n - alpha + r
        noise = _noisy_uniform(spec, derive_seed(example_key, _PREFILL_KEY + r), q + 1)
        out[:, r, :q + 1] = noise / noise.sum(axis=1, keepdims=True)
        m = focus_mask[:q + 1]
        if not m.any():
            continue
        for h, w in spec.planted.items():
            i = h[0] * H + h[1]
            row = np.zeros(q + 1)
            off = ~m
            row[off] = (1.0 - w) * noise[i][off] / noise[i][off].sum()
            row[m] += w / m.sum()
            out[i, r, :q + 1] = row
    return {h: out[i] for i, h in enumerate(head_ids(L, H))}
