"""Integer per-head KV budgets.

``headkv`` builds a shared pool from every head and hands it back in proportion
to importance:

    pool    = (b / beta) * L * H
    b_h     = (b - b / beta) + S_h * pool

with S_h the normalised importance. Real targets are turned into integers by
largest-remainder rounding so that the plan total is exactly ``b * L * H``.
``uniform``, ``pyramid`` and ``ada`` reproduce the layer-level baselines'
allocation behaviour with the same total. The protected window of ``alpha``
entries is kept on top of every budget.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import HeadKVError
from .importance import ImportanceScores, matrix_csv
from .numkit import largest_remainder, top_k_indices

POLICIES = ("headkv", "uniform", "pyramid", "ada")
BETA_SWEEP = (1.005, 1.01, 1.1, 1.2, 1.5, 2.0, 5.0, 10.0)
BUDGET_SWEEP = (64, 128, 256, 512, 1024)


@dataclass(frozen=True)
class AllocationConfig:
    b: int = 128
    beta: float = 2.0
    alpha: int = 8
    policy: str = "headkv"

    def __post_init__(self):
        if self.b < 1:
            raise HeadKVError("base budget b must be >= 1")
        if not self.beta > 1:
            raise HeadKVError("beta must be > 1")
        if self.alpha < 0:
            raise HeadKVError("alpha must be >= 0")
        if self.policy not in POLICIES:
            raise HeadKVError(f"unknown policy {self.policy!r}")


@dataclass(frozen=True)
class BudgetPlan:
    """Per-head budgets (excluding the protected window) as an (L, H) int array.

    ``weights`` ranks heads for tie-breaking and for redistributing excess when
    the plan is clamped to a short sequence.
    """

    per_head: np.ndarray
    alpha: int
    weights: np.ndarray
    policy: str = "headkv"
    nominal_total: int | None = None
    clamped: bool = False

    @property
    def total(self) -> int:
        return int(self.per_head.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.per_head.shape

    def entries(self) -> np.ndarray:
        return self.per_head + self.alpha

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "shape": list(self.shape),
            "alpha": self.alpha,
            "total": self.total,
            "nominal_total": self.nominal_total,
            "clamped": self.clamped,
            "per_head": self.per_head.tolist(),
            "weights": self.weights.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BudgetPlan":
        return cls(np.asarray(d["per_head"], dtype=np.int64), int(d["alpha"]),
                   np.asarray(d["weights"], dtype=np.float64), d["policy"],
                   d.get("nominal_total"), bool(d.get("clamped", False)))

    def heatmap_csv(self) -> str:
        return matrix_csv(self.per_head, "{:d}")


def headkv_targets(normalized: np.ndarray, b: int, beta: float) -> np.ndarray:
    L, H = normalized.shape
    pool = (b / beta) * L * H
    return (b - b / beta) + normalized * pool


def allocate_headkv(scores: ImportanceScores, cfg: AllocationConfig) -> BudgetPlan:
    if not cfg.beta > 1:
        raise HeadKVError("beta must be > 1")
    s = scores.normalized
    L, H = s.shape
    total = cfg.b * L * H
    per_head = largest_remainder(headkv_targets(s, cfg.b, cfg.beta), total, priority=s)
    return BudgetPlan(per_head, cfg.alpha, s.copy(), "headkv", total)


def allocate_uniform(cfg: AllocationConfig, n_layers: int, n_heads: int) -> BudgetPlan:
    shape = (n_layers, n_heads)
    w = np.full(shape, 1.0 / (n_layers * n_heads))
    return BudgetPlan(np.full(shape, cfg.b, dtype=np.int64), cfg.alpha, w, "uniform",
                      cfg.b * n_layers * n_heads)


def pyramid_targets(b: int, n_layers: int) -> np.ndarray:
    """Linear ramp from 3b/2 at the bottom layer to b/2 at the top; mean b."""
    b_min = b / 2
    b_max = 2 * b - b_min
    return b_max - np.arange(n_layers) * (b_max - b_min) / (n_layers - 1)


def allocate_pyramid(cfg: AllocationConfig, n_layers: int, n_heads: int) -> BudgetPlan:
    if n_layers < 2:
        raise HeadKVError("pyramid allocation needs at least two layers")
    t = np.repeat(pyramid_targets(cfg.b, n_layers)[:, None], n_heads, axis=1)
    total = cfg.b * n_layers * n_heads
    return BudgetPlan(largest_remainder(t, total, priority=t), cfg.alpha, t / t.sum(),
                      "pyramid", total)


def concentration(pooled: np.ndarray, b: int) -> float:
    """Sum of a head's ``b`` largest pooled observation scores."""
    pooled = np.asarray(pooled, dtype=np.float64)
    return float(pooled[top_k_indices(pooled, min(b, len(pooled)))].sum())


def allocate_ada(cfg: AllocationConfig, pooled_scores, n_layers: int, n_heads: int) -> BudgetPlan:
    """Each layer keeps ``b * H``; heads split it in proportion to their concentration.

    ``pooled_scores`` maps ``(layer, head)`` to that head's pooled observation
    scores, or is an (L, H) array of precomputed concentrations.
    """
    if pooled_scores is None:
        raise HeadKVError("ada allocation needs pooled observation scores")
    if isinstance(pooled_scores, np.ndarray) and pooled_scores.shape == (n_layers, n_heads):
        conc = pooled_scores.astype(np.float64)
    else:
        conc = np.zeros((n_layers, n_heads))
        for l in range(n_layers):
            for h in range(n_heads):
                if (l, h) not in pooled_scores:
                    raise HeadKVError(f"missing pooled scores for head {(l, h)}")
                conc[l, h] = concentration(pooled_scores[(l, h)], cfg.b)
    per_head = np.zeros((n_layers, n_heads), dtype=np.int64)
    layer_total = cfg.b * n_heads
    for l in range(n_layers):
        c = conc[l]
        share = c / c.sum() if c.sum() > 0 else np.full(n_heads, 1.0 / n_heads)
        per_head[l] = largest_remainder(share * layer_total, layer_total, priority=share)
    w = conc / conc.sum() if conc.sum() > 0 else np.full(conc.shape, 1.0 / conc.size)
    return BudgetPlan(per_head, cfg.alpha, w, "ada", cfg.b * n_layers * n_heads)


def allocate(cfg: AllocationConfig, shape: tuple[int, int], scores: ImportanceScores | None = None,
             pooled_scores=None) -> BudgetPlan:
    L, H = shape
    if cfg.policy == "headkv":
        if scores is None:
            raise HeadKVError("headkv allocation needs importance scores")
        return allocate_headkv(scores, cfg)
    if cfg.policy == "uniform":
        return allocate_uniform(cfg, L, H)
    if cfg.policy == "pyramid":
        return allocate_pyramid(cfg, L, H)
    return allocate_ada(cfg, pooled_scores, L, H)


def clamp_to_sequence(plan: BudgetPlan, n: int) -> BudgetPlan:
    """Cap every budget at ``n - alpha``, moving the excess to uncapped heads.

    Excess is shared in proportion to ``plan.weights`` (equally if the uncapped
    heads all weigh 0), rounded by largest remainder, and the process repeats
    until no head is over the cap. Whatever cannot be placed is dropped.
    """
    if n < plan.alpha:
        raise HeadKVError(f"sequence length {n} shorter than alpha={plan.alpha}")
    cap = n - plan.alpha
    b = plan.per_head.astype(np.int64).ravel().copy()
    w = plan.weights.ravel()
    while True:
        excess = int(np.clip(b - cap, 0, None).sum())
        b = np.minimum(b, cap)
        free = b < cap
        if excess == 0 or not free.any():
            break
        wf = w[free]
        share = wf / wf.sum() if wf.sum() > 0 else np.full(wf.size, 1.0 / wf.size)
        b[np.flatnonzero(free)] += largest_remainder(share * excess, excess, priority=wf)
    changed = not np.array_equal(b.reshape(plan.shape), plan.per_head)
    return replace(plan, per_head=b.reshape(plan.shape),
                   clamped=plan.clamped or changed)


@dataclass
class ValidationReport:
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def validate_plan(plan: BudgetPlan, cfg: AllocationConfig, n_layers: int,
                  n_heads: int) -> ValidationReport:
    """Conservation (unclamped plans only), non-negativity and weight-order monotonicity."""
    rep = ValidationReport()
    rep.checks["shape"] = plan.shape == (n_layers, n_heads)
    if plan.clamped:
        rep.checks["conservation"] = plan.total <= cfg.b * n_layers * n_heads
    else:
        rep.checks["conservation"] = plan.total == cfg.b * n_layers * n_heads
    rep.checks["non_negative"] = bool(np.all(plan.per_head >= 0))
    # ada conserves per layer, so only compare heads within a layer
    groups = [plan.per_head[l] for l in range(n_layers)] if plan.policy == "ada" else [plan.per_head.ravel()]
    wgroups = [plan.weights[l] for l in range(n_layers)] if plan.policy == "ada" else [plan.weights.ravel()]
    rep.checks["monotonicity"] = all(_weakly_monotone(w, bud) for bud, w in zip(groups, wgroups))
    return rep


def _weakly_monotone(weights: np.ndarray, budgets: np.ndarray) -> bool:
    """True iff a strictly heavier head never gets a smaller budget."""
    best_below = -1
    for w in np.unique(weights):
        group = budgets[weights == w]
        if group.min() < best_below:
            return False
        best_below = max(best_below, int(group.max()))
    return True
