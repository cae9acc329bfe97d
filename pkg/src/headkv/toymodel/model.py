"""A tiny attention-only decoder used to produce real KV tensors and attention.

Each layer is multi-head causal attention with a residual connection; there is no
MLP and no normalisation. Positions come from a learned absolute embedding indexed
by the ORIGINAL token position, so evicting cache rows never shifts positions.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import HeadKVError
from ..kvstore import HeadCache, HeadId, append
from ..numkit import SeededRng, masked_softmax, softmax
from ..probes import ANSWER_START
from .trace import AttentionTrace, StepRecord


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 8
    d_head: int = 4
    vocab_size: int = 512
    seed: int = 0
    max_context: int = 4096

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise HeadKVError("need at least one layer and one head")
        if self.d_model != self.n_heads * self.d_head:
            raise HeadKVError(
                f"d_model={self.d_model} must equal n_heads*d_head={self.n_heads * self.d_head}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_layers, self.n_heads)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class ToyModel:
    spec: ModelSpec
    embed: np.ndarray
    pos_embed: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    unembed: np.ndarray

    def head_slice(self, h: int) -> slice:
        d = self.spec.d_head
        return slice(h * d, (h + 1) * d)


def build_toy_model(spec: ModelSpec) -> ToyModel:
    d, L = spec.d_model, spec.n_layers
    scale = 1.0 / math.sqrt(d)
    rng = SeededRng(spec.seed)

    def draw(key: int, rows: int, cols: int) -> np.ndarray:
        return rng.child(key).uniform(rows * cols, -scale, scale).reshape(rows, cols)

    stack = lambda base: np.stack([draw(base + l, d, d) for l in range(L)])
    return ToyModel(
        spec=spec,
        embed=draw(1, spec.vocab_size, d),
        pos_embed=draw(2, spec.max_context, d),
        w_q=stack(1000),
        w_k=stack(2000),
        w_v=stack(3000),
        w_o=stack(4000),
        unembed=draw(3, d, spec.vocab_size),
    )


@dataclass
class Prefill:
    caches: dict[HeadId, HeadCache]
    attention: dict[HeadId, np.ndarray]
    logits: np.ndarray
    n: int


def _check_tokens(model: ToyModel, tokens: np.ndarray, start: int = 0) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.spec.vocab_size):
        raise HeadKVError("token id outside vocabulary")
    if start + len(tokens) > model.spec.max_context:
        raise HeadKVError(f"sequence exceeds max_context={model.spec.max_context}")


def prefill(model: ToyModel, tokens, attention_rows: int | None = None) -> Prefill:
    """Run the prompt through the model.

    Returns full per-head K/V caches, per-head causal attention matrices (only the
    last ``attention_rows`` query rows if given) and the logits at the last position.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if n < 1:
        raise HeadKVError("empty prompt")
    _check_tokens(model, tokens)
    spec = model.spec
    keep = n if attention_rows is None else min(attention_rows, n)
    causal = np.tril(np.ones((n, n), dtype=bool))
    inv = 1.0 / math.sqrt(spec.d_head)
    x = model.embed[tokens] + model.pos_embed[:n]
    caches, attention = {}, {}
    for l in range(spec.n_layers):
        q, k, v = x @ model.w_q[l], x @ model.w_k[l], x @ model.w_v[l]
        out = np.empty_like(x)
        for h in range(spec.n_heads):
            sl = model.head_slice(h)
            a = masked_softmax((q[:, sl] @ k[:, sl].T) * inv, causal)
            out[:, sl] = a @ v[:, sl]
            hid = HeadId(l, h)
            caches[hid] = HeadCache.from_full(k[:, sl], v[:, sl])
            attention[hid] = a[n - keep:].copy()
        x = x + out @ model.w_o[l]
    return Prefill(caches, attention, x[-1] @ model.unembed, n)


def _step(model: ToyModel, caches: dict[HeadId, HeadCache], token: int, position: int):
    spec = model.spec
    inv = 1.0 / math.sqrt(spec.d_head)
    x = model.embed[token] + model.pos_embed[position]
    attention = {}
    for l in range(spec.n_layers):
        q, k, v = x @ model.w_q[l], x @ model.w_k[l], x @ model.w_v[l]
        out = np.empty_like(x)
        for h in range(spec.n_heads):
            sl = model.head_slice(h)
            hid = HeadId(l, h)
            cache = append(caches[hid], k[sl], v[sl], position)
            caches[hid] = cache
            a = softmax((cache.keys @ q[sl]) * inv)
            out[sl] = a @ cache.values
            attention[hid] = a
        x = x + out @ model.w_o[l]
    return x @ model.unembed, attention


def _next_position(caches) -> int:
    return max(int(c.positions[-1]) for c in caches.values() if c.size) + 1


def _decode(model, caches, start_token, n_tokens, forced, start_position, record):
    caches = dict(caches)
    if start_position is None:
        start_position = _next_position(caches)
    trace = AttentionTrace(model.spec.shape)
    token, out = int(start_token), []
    for t in range(n_tokens):
        pos = start_position + t
        if pos >= model.spec.max_context:
            raise HeadKVError("decoding past max_context")
        logits, attention = _step(model, caches, token, pos)
        best = int(np.argmax(logits))
        token = int(forced[t]) if forced is not None else best
        out.append(token)
        if record:
            trace.steps.append(StepRecord(
                token, attention, {h: caches[h].positions for h in attention}, best))
    return out, trace


def decode_teacher_forced(model: ToyModel, caches: dict[HeadId, HeadCache], target,
                          start_token: int = ANSWER_START,
                          start_position: int | None = None) -> AttentionTrace:
    """Decode ``len(target)`` steps, feeding the target token at every step.

    Step 1 feeds ``start_token``; step t > 1 feeds ``target[t-2]``. The step-t
    attention covers the retained cache plus the t tokens fed so far, and the
    recorded emitted token is ``target[t-1]``. ``argmax_token`` keeps the
    model's own greedy choice.
    """
    target = np.asarray(target, dtype=np.int64)
    if len(target) == 0:
        raise HeadKVError("empty decode target")
    _check_tokens(model, target)
    _check_tokens(model, np.asarray([start_token]))
    _, trace = _decode(model, caches, start_token, len(target), target, start_position, True)
    return trace


def greedy_decode(model: ToyModel, caches: dict[HeadId, HeadCache], n_tokens: int,
                  start_token: int = ANSWER_START, start_position: int | None = None,
                  record: bool = False):
    """Greedy generation of ``n_tokens`` tokens; returns ``(tokens, trace)``."""
    if n_tokens < 1:
        raise HeadKVError("n_tokens must be >= 1")
    _check_tokens(model, np.asarray([start_token]))
    return _decode(model, caches, start_token, n_tokens, None, start_position, record)
