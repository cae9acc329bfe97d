"""Estimation, needle-grid and reasoning-suite runs over a toy model or a planted oracle.

Every example is generated from a seed derived from (corpus_seed, purpose,
length, depth, index), so runs are reproducible and methods compared in one
call see exactly the same corpora and the same pooled selection scores.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..allocation import (AllocationConfig, BudgetPlan, allocate, allocate_ada, clamp_to_sequence,
                          concentration)
from ..errors import HeadKVError, InvariantViolation
from ..importance import ImportanceScores, aggregate, score_trace
from ..kvstore import CacheReport, HeadCache, HeadId, head_ids
from ..numkit import SeededRng, derive_seed
from ..probes import (NeedleExample, Span, make_multi_needle_task, sample_r2_example,
                      sample_retrieval_example)
from ..selection import compress, pooled_scores, ranked_positions
from ..toymodel import (ModelSpec, build_toy_model, decode_teacher_forced, greedy_decode,
                        oracle_emit, oracle_prefill_attention, oracle_trace,
                        prefill)
from .config import ExperimentConfig

log = logging.getLogger(__name__)

ESTIMATE, NEEDLE, REASON = 1, 2, 3
FULL = "full"


class OracleBackend:
    def __init__(self, cfg: ExperimentConfig):
        self.spec = cfg.model.spec
        self.shape = self.spec.shape

    def trace(self, prompt, span: Span, key: int):
        return oracle_trace(self.spec, prompt, span, example_key=key)

    def prefill(self, prompt, focus, alpha: int, key: int):
        n = len(prompt)
        caches = {h: HeadCache.positions_only(n) for h in head_ids(*self.shape)}
        return caches, oracle_prefill_attention(self.spec, n, focus, alpha, key)

    def answer(self, prompt, span: Span, full, caches, kept, key: int):
        """(emitted, expected) tokens for the answer at ``span``."""
        got = oracle_emit(self.spec, prompt, span, kept)
        return got, [int(t) for t in np.asarray(prompt)[span.start:span.stop]]

    def important(self, scores: ImportanceScores | None) -> list[HeadId]:
        return [h for h, w in self.spec.planted.items() if w > 0]


class ToyBackend:
    def __init__(self, cfg: ExperimentConfig):
        self.model = build_toy_model(cfg.model)
        self.shape = cfg.model.shape
        self._reference: dict[int, list[int]] = {}

    def trace(self, prompt, span: Span, key: int):
        pre = prefill(self.model, prompt, attention_rows=1)
        return decode_teacher_forced(self.model, pre.caches, np.asarray(prompt)[span.start:span.stop])

    def prefill(self, prompt, focus, alpha: int, key: int):
        pre = prefill(self.model, prompt, attention_rows=alpha)
        return pre.caches, pre.attention

    def answer(self, prompt, span: Span, full, caches, kept, key: int):
        """Compressed greedy decode against the full-cache greedy decode."""
        n = len(span)
        if key not in self._reference:
            # every method on an example shares one full-cache decode
            self._reference = {key: greedy_decode(self.model, full, n, start_position=len(prompt))[0]}
        ref = self._reference[key]
        got, _ = greedy_decode(self.model, caches, n, start_position=len(prompt))
        return got, ref

    def important(self, scores: ImportanceScores | None) -> list[HeadId]:
        heads = head_ids(*self.shape)
        if scores is None:
            return heads
        cut = 1.0 / len(heads)
        return [h for h in heads if scores.normalized[h] >= cut - 1e-12]


def make_backend(cfg: ExperimentConfig):
    return ToyBackend(cfg) if isinstance(cfg.model, ModelSpec) else OracleBackend(cfg)


def _corpus_kind(estimator: str) -> str:
    return "r2" if estimator == "R2" else "retrieval"


def _estimation_example(cfg: ExperimentConfig, rng: SeededRng, length: int, depth: float,
                        kind: str) -> NeedleExample:
    if kind == "r2":
        return sample_r2_example(rng, length, cfg.vocab_size, depth, part_len=cfg.needle_len)
    return sample_retrieval_example(rng, length, cfg.vocab_size, depth, needle_len=cfg.needle_len)


def estimation_scores_multi(cfg: ExperimentConfig, estimators: Sequence[str],
                            backend=None) -> dict[str, list[np.ndarray]]:
    """Per-example score arrays for several estimators.

    Estimators drawing on the same probe corpus (R and ER both use plain
    retrieval needles) score the same traces, so each trace is built once.
    """
    backend = backend or make_backend(cfg)
    out: dict[str, list[np.ndarray]] = {e: [] for e in estimators}
    kinds: dict[str, list[str]] = {}
    for e in estimators:
        kinds.setdefault(_corpus_kind(e), []).append(e)
    for kind, ests in kinds.items():
        for length in cfg.grid.lengths:
            for di, depth in enumerate(cfg.grid.depths):
                for i in range(cfg.n_examples):
                    key = derive_seed(cfg.corpus_seed, ESTIMATE, length, di, i)
                    ex = _estimation_example(cfg, SeededRng(key), length, depth, kind)
                    trace = backend.trace(ex.prompt, ex.correct_span, key)
                    for e in ests:
                        out[e].append(score_trace(e, trace, ex))
    return out


def estimation_scores(cfg: ExperimentConfig, backend=None) -> list[np.ndarray]:
    """Per-example (L, H) score arrays over the length x depth x n_examples grid."""
    return estimation_scores_multi(cfg, [cfg.estimator], backend)[cfg.estimator]


def _aggregate_checked(per_example: list[np.ndarray], tag: str) -> ImportanceScores:
    scores = aggregate(per_example, tag)
    if np.any(scores.raw > 1 + 1e-9):
        raise InvariantViolation("aggregated importance above 1")
    return scores


def run_estimation(cfg: ExperimentConfig, backend=None) -> ImportanceScores:
    return _aggregate_checked(estimation_scores(cfg, backend), cfg.estimator)


def run_estimation_multi(cfg: ExperimentConfig, estimators: Sequence[str] = ("R", "ER", "R2"),
                         backend=None) -> dict[str, ImportanceScores]:
    per = estimation_scores_multi(cfg, estimators, backend)
    return {e: _aggregate_checked(per[e], e) for e in estimators}


@dataclass(frozen=True)
class Method:
    """One allocation policy in a comparison; ``scores`` only for headkv."""

    name: str
    allocation: AllocationConfig
    scores: ImportanceScores | None = None
    full: bool = False

    @property
    def budget_label(self):
        return FULL if self.full else self.allocation.b


@dataclass
class Row:
    method: str
    b: object
    length: int
    depth: float | None
    accuracy: float
    retained_fraction: float

    def as_csv(self) -> list[str]:
        depth = "" if self.depth is None else f"{self.depth:g}"
        return [self.method, str(self.b), str(self.length), depth,
                f"{self.accuracy:.6f}", f"{self.retained_fraction:.6f}"]


RESULT_HEADER = ["method", "b", "length", "depth", "accuracy", "retained_fraction"]


@dataclass
class _Cell:
    hits: int = 0
    total: int = 0
    retained: float = 0.0


def plan_for(method: Method, shape, n: int, alpha: int, pooled) -> BudgetPlan:
    if method.full:
        L, H = shape
        w = np.full(shape, 1.0 / (L * H))
        return BudgetPlan(np.full(shape, n - alpha, dtype=np.int64), alpha, w, method.name)
    cfg = method.allocation
    if cfg.policy == "ada":
        conc = np.zeros(shape)
        for h, p in pooled.items():
            conc[h] = concentration(p, cfg.b)
        plan = allocate_ada(cfg, conc, *shape)
    else:
        plan = allocate(cfg, shape, method.scores)
    return clamp_to_sequence(plan, n)


def _retained_fraction(kept: dict[HeadId, np.ndarray], heads: Sequence[HeadId], span: Span) -> float:
    if not heads or len(span) == 0:
        return 1.0
    fr = [np.count_nonzero(span.mask(kept[h])) / len(span) for h in heads]
    return float(np.mean(fr))


def _check_report(report: CacheReport, plan: BudgetPlan, n: int) -> None:
    for h, e in report.per_head_entries.items():
        if e != min(n, int(plan.per_head[h]) + plan.alpha):
            raise InvariantViolation(f"head {h} holds {e} entries, plan says {plan.per_head[h]}+{plan.alpha}")


@dataclass
class EvalResult:
    rows: list[Row] = field(default_factory=list)
    reports: dict[tuple[str, object], CacheReport] = field(default_factory=dict)


def evaluate(cfg: ExperimentConfig, methods: Sequence[Method], suite: str, backend=None) -> EvalResult:
    backend = backend or make_backend(cfg)
    alpha = cfg.alpha
    tau = cfg.success_threshold
    shape = backend.shape
    cells: dict[tuple, _Cell] = {}
    result = EvalResult()
    report_len = max(cfg.grid.lengths)
    depths = list(enumerate(cfg.grid.depths)) if suite == "needle" else [(0, None)]
    for length in cfg.grid.lengths:
        for di, depth in depths:
            for i in range(cfg.n_eval_examples):
                purpose = NEEDLE if suite == "needle" else REASON
                key = derive_seed(cfg.corpus_seed, purpose, length, di, i)
                rng = SeededRng(key)
                if suite == "needle":
                    ex = sample_retrieval_example(rng, length, cfg.vocab_size, depth,
                                                  needle_len=cfg.needle_len)
                    prompt, answer_span = ex.prompt, ex.needle_span
                    focus = ex.needle_span.positions
                    fact_spans = [ex.needle_span]
                else:
                    context, task = make_multi_needle_task(rng, cfg.n_facts, length - 2, cfg.vocab_size)
                    prompt = np.concatenate([context, task.question])
                    answer_span = task.answer_span
                    focus = np.concatenate([s.positions for s in task.fact_spans])
                    fact_spans = task.entity_spans
                n = len(prompt)
                if n <= alpha:
                    raise HeadKVError(f"length {n} leaves no room beyond alpha={alpha}")
                full, attention = backend.prefill(prompt, focus, alpha, key)
                pooled = {h: pooled_scores(attention[h], cfg.pooling) for h in full}
                ranking = {h: ranked_positions(p) for h, p in pooled.items()}
                for m in methods:
                    plan = plan_for(m, shape, n, alpha, pooled)
                    caches, report, kept = compress(full, attention, plan, cfg.pooling, pooled, ranking)
                    _check_report(report, plan, n)
                    heads = backend.important(m.scores)
                    fracs = [_retained_fraction(kept, heads, s) for s in fact_spans]
                    got, want = backend.answer(prompt, answer_span, full, caches, kept, key)
                    ok = all(f >= tau - 1e-12 for f in fracs) and list(got) == list(want)
                    cell = cells.setdefault((m.name, m.budget_label, length, depth), _Cell())
                    cell.hits += ok
                    cell.total += 1
                    cell.retained += float(np.mean(fracs))
                    if length == report_len and di == 0 and i == 0:
                        result.reports[(m.name, m.budget_label)] = report
    for (name, b, length, depth), c in cells.items():
        result.rows.append(Row(name, b, length, depth, c.hits / c.total, c.retained / c.total))
    return result


def run_needle_grid(cfg: ExperimentConfig, scores: ImportanceScores | None = None,
                    methods: Sequence[Method] | None = None) -> list[Row]:
    methods = methods or [config_method(cfg, scores)]
    return evaluate(cfg, methods, "needle").rows


def run_reasoning_suite(cfg: ExperimentConfig, scores: ImportanceScores | None = None,
                        methods: Sequence[Method] | None = None) -> list[Row]:
    methods = methods or [config_method(cfg, scores)]
    return evaluate(cfg, methods, "reason").rows


def config_method(cfg: ExperimentConfig, scores: ImportanceScores | None) -> Method:
    a = cfg.allocation
    if a.policy == "headkv":
        if scores is None:
            raise HeadKVError("headkv evaluation needs importance scores")
        return Method(f"headkv-{scores.estimator_tag}", a, scores)
    return Method(a.policy, a)


BASELINES = ("uniform", "pyramid", "ada")
HEADKV_ESTIMATORS = ("R", "ER", "R2")


def comparison_methods(cfg: ExperimentConfig, scores: dict[str, ImportanceScores]) -> list[Method]:
    budgets = cfg.budgets or [cfg.allocation.b]
    betas = cfg.betas or [cfg.allocation.beta]
    methods = []
    for b in budgets:
        full = b == FULL
        base = replace(cfg.allocation, b=cfg.allocation.b if full else b)
        for policy in BASELINES:
            methods.append(Method(policy, replace(base, policy=policy), None, full))
        for est in HEADKV_ESTIMATORS:
            for beta in betas:
                name = f"headkv-{est}" if len(betas) == 1 else f"headkv-{est}@beta={beta:g}"
                methods.append(Method(name, replace(base, policy="headkv", beta=beta),
                                      scores[est], full))
    return methods


@dataclass
class Comparison:
    needle: list[Row]
    reasoning: list[Row]
    reports: dict[tuple[str, object], CacheReport]
    scores: dict[str, ImportanceScores]


def compare_methods(cfg: ExperimentConfig, include_reasoning: bool = True) -> Comparison:
    backend = make_backend(cfg)
    log.info("estimating importance with %s", ", ".join(HEADKV_ESTIMATORS))
    scores = run_estimation_multi(cfg, HEADKV_ESTIMATORS, backend)
    methods = comparison_methods(cfg, scores)
    log.info("needle grid: %d methods", len(methods))
    needle = evaluate(cfg, methods, "needle", backend)
    reasoning = evaluate(cfg, methods, "reason", backend) if include_reasoning else EvalResult()
    return Comparison(needle.rows, reasoning.rows, needle.reports, scores)


def mean_accuracy(rows: Sequence[Row], method: str, b=None) -> float:
    sel = [r.accuracy for r in rows if r.method == method and (b is None or r.b == b)]
    if not sel:
        raise HeadKVError(f"no rows for method {method!r}")
    return float(np.mean(sel))
