"""Synthetic needle corpora over an integer-token language.

The vocabulary is cut into disjoint ranges (specials, filler, needle, question,
answer) so that filler tokens can never be confused with inserted material.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import HeadKVError
from .numkit import SeededRng

PAD, ANSWER_START, NOISE_TOKEN, QUESTION_MARK, RELATION = 0, 1, 2, 3, 4
N_SPECIAL = 8
MIN_RANGE = 8


class Span(NamedTuple):
    """Half-open position range ``[start, stop)``."""

    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    def __contains__(self, pos) -> bool:
        return self.start <= pos < self.stop

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.start, self.stop, dtype=np.int64)

    def mask(self, positions: np.ndarray) -> np.ndarray:
        return (positions >= self.start) & (positions < self.stop)


EMPTY = Span(0, 0)


@dataclass(frozen=True)
class VocabLayout:
    filler: range
    needle: range
    question: range
    entity: range
    location: range

    @classmethod
    def for_vocab(cls, vocab_size: int) -> "VocabLayout":
        usable = vocab_size - N_SPECIAL
        n_filler = usable // 2
        n_needle = usable // 4
        n_question = usable // 8
        n_answer = usable - n_filler - n_needle - n_question
        if min(n_filler, n_needle, n_question, n_answer // 2) < MIN_RANGE:
            raise HeadKVError(f"vocab_size={vocab_size} too small to reserve token ranges")
        a = N_SPECIAL
        b = a + n_filler
        c = b + n_needle
        d = c + n_question
        e = d + n_answer // 2
        return cls(range(a, b), range(b, c), range(c, d), range(d, e), range(e, vocab_size))

    @property
    def answer(self) -> range:
        return range(self.entity.start, self.location.stop)


def _draw(rng: SeededRng, pool: range, k: int) -> np.ndarray:
    return np.asarray(pool)[rng.sample(len(pool), k)].astype(np.int64)


@dataclass(frozen=True)
class NeedleExample:
    context: np.ndarray
    question: np.ndarray
    needle_span: Span
    reasoning_span: Span
    wrong_span: Span
    correct_span: Span
    depth: float
    target: np.ndarray

    @property
    def prompt(self) -> np.ndarray:
        return np.concatenate([self.context, self.question])

    @property
    def is_retrieval(self) -> bool:
        return len(self.reasoning_span) == 0

    def to_dict(self) -> dict:
        return {
            "context": self.context.tolist(),
            "question": self.question.tolist(),
            "needle_span": list(self.needle_span),
            "reasoning_span": list(self.reasoning_span),
            "wrong_span": list(self.wrong_span),
            "correct_span": list(self.correct_span),
            "depth": self.depth,
            "target": self.target.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeedleExample":
        return cls(
            context=np.asarray(d["context"], dtype=np.int64),
            question=np.asarray(d["question"], dtype=np.int64),
            needle_span=Span(*d["needle_span"]),
            reasoning_span=Span(*d["reasoning_span"]),
            wrong_span=Span(*d["wrong_span"]),
            correct_span=Span(*d["correct_span"]),
            depth=float(d["depth"]),
            target=np.asarray(d["target"], dtype=np.int64),
        )


def insertion_start(depth: float, context_len: int, needle_len: int) -> int:
    # half-up rounding, not Python's banker's rounding
    return int(math.floor(depth * (context_len - needle_len) + 0.5))


def gen_haystack(rng: SeededRng, length: int, vocab_size: int) -> np.ndarray:
    if length < 1:
        raise HeadKVError("haystack length must be >= 1")
    filler = VocabLayout.for_vocab(vocab_size).filler
    return rng.integers(filler.start, filler.stop, length)


def _insert(haystack: np.ndarray, needle: np.ndarray, depth: float) -> tuple[np.ndarray, int]:
    if not 0.0 <= depth <= 1.0:
        raise HeadKVError(f"depth {depth} outside [0, 1]")
    if len(needle) > len(haystack):
        raise HeadKVError("needle longer than haystack")
    start = insertion_start(depth, len(haystack), len(needle))
    context = np.array(haystack, dtype=np.int64, copy=True)
    context[start:start + len(needle)] = needle
    return context, start


def make_retrieval_example(haystack, needle, question, depth: float) -> NeedleExample:
    needle = np.asarray(needle, dtype=np.int64)
    context, start = _insert(np.asarray(haystack), needle, depth)
    span = Span(start, start + len(needle))
    return NeedleExample(context, np.asarray(question, dtype=np.int64), span, EMPTY, EMPTY, span,
                         float(depth), needle.copy())


def make_r2_example(haystack, r, c1, c2, question, depth: float) -> NeedleExample:
    """Insert reasoning step, wrong answer and correct answer as one contiguous passage."""
    r, c1, c2 = (np.asarray(x, dtype=np.int64) for x in (r, c1, c2))
    if min(len(r), len(c1), len(c2)) == 0:
        raise HeadKVError("r, c1 and c2 must all be non-empty")
    needle = np.concatenate([r, c1, c2])
    context, start = _insert(np.asarray(haystack), needle, depth)
    r_span = Span(start, start + len(r))
    c1_span = Span(r_span.stop, r_span.stop + len(c1))
    c2_span = Span(c1_span.stop, c1_span.stop + len(c2))
    return NeedleExample(context, np.asarray(question, dtype=np.int64), Span(start, c2_span.stop),
                         r_span, c1_span, c2_span, float(depth), c2.copy())


def sample_retrieval_example(rng: SeededRng, length: int, vocab_size: int, depth: float,
                             needle_len: int = 4, question_len: int = 8) -> NeedleExample:
    """Draw a haystack, needle and question so that the full prompt is ``length`` tokens."""
    layout = VocabLayout.for_vocab(vocab_size)
    haystack = gen_haystack(rng, length - question_len, vocab_size)
    needle = _draw(rng, layout.needle, needle_len)
    question = np.concatenate([[QUESTION_MARK], _draw(rng, layout.question, question_len - 1)])
    return make_retrieval_example(haystack, needle, question, depth)


def sample_r2_example(rng: SeededRng, length: int, vocab_size: int, depth: float,
                      part_len: int = 4, question_len: int = 8) -> NeedleExample:
    layout = VocabLayout.for_vocab(vocab_size)
    haystack = gen_haystack(rng, length - question_len, vocab_size)
    r = _draw(rng, layout.needle, part_len)
    answers = _draw(rng, layout.answer, 2 * part_len)
    question = np.concatenate([[QUESTION_MARK], _draw(rng, layout.question, question_len - 1)])
    return make_r2_example(haystack, r, answers[:part_len], answers[part_len:], question, depth)


@dataclass(frozen=True)
class ReasoningTask:
    facts: list[tuple[int, int, int]]
    question_entity: int
    answer: int
    insert_depths: list[float]
    fact_spans: list[Span] = field(default_factory=list)

    @property
    def question(self) -> np.ndarray:
        return np.array([QUESTION_MARK, self.question_entity], dtype=np.int64)

    @property
    def entity_spans(self) -> list[Span]:
        return [s for f, s in zip(self.facts, self.fact_spans) if f[0] == self.question_entity]

    @property
    def answer_span(self) -> Span:
        """Position of the answer token inside the last question-entity fact."""
        last = self.entity_spans[-1]
        return Span(last.stop - 1, last.stop)


def answer_for(facts: Sequence[tuple[int, int, int]], entity: int) -> int:
    """Location in the last fact that mentions ``entity``."""
    hits = [f[2] for f in facts if f[0] == entity]
    if not hits:
        raise HeadKVError(f"entity {entity} is never mentioned")
    return hits[-1]


def make_multi_needle_task(rng: SeededRng, n_facts: int, context_length: int,
                           vocab_size: int, n_entities: int = 3) -> tuple[np.ndarray, ReasoningTask]:
    """Scatter ``entity RELATION location`` facts through a haystack, in order.

    At least two facts mention the question entity, each at a different location,
    so the answer is only recoverable from the last of them.
    """
    if n_facts < 2:
        raise HeadKVError("need at least two facts")
    fact_len = 3
    if n_facts * fact_len > context_length:
        raise HeadKVError("context too short for all facts")
    layout = VocabLayout.for_vocab(vocab_size)
    entities = _draw(rng, layout.entity, n_entities)
    q_entity = int(entities[0])
    n_q = max(2, n_facts // 2)
    q_slots = set(rng.sample(n_facts, n_q).tolist())
    q_locs = _draw(rng, layout.location, n_q)
    others = entities[1:] if n_entities > 1 else entities
    facts = []
    k = 0
    for i in range(n_facts):
        if i in q_slots:
            facts.append((q_entity, RELATION, int(q_locs[k])))
            k += 1
        else:
            e = int(others[rng.integers(0, len(others), 1)[0]])
            loc = int(rng.integers(layout.location.start, layout.location.stop, 1)[0])
            facts.append((e, RELATION, loc))
    depths = np.sort(rng.uniform(n_facts)).tolist()
    context = gen_haystack(rng, context_length, vocab_size)
    free = context_length - n_facts * fact_len
    spans = []
    for i, (d, f) in enumerate(zip(depths, facts)):
        start = insertion_start(d, free + fact_len, fact_len) + i * fact_len
        context[start:start + fact_len] = f
        spans.append(Span(start, start + fact_len))
    task = ReasoningTask(facts, q_entity, answer_for(facts, q_entity), depths, spans)
    return context, task


def write_corpus(path, examples: Iterable[NeedleExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")


def read_corpus(path) -> list[NeedleExample]:
    with open(path, encoding="utf-8") as fh:
        return [NeedleExample.from_dict(json.loads(line)) for line in fh if line.strip()]
