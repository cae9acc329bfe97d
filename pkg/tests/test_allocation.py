import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headkv.allocation import (BETA_SWEEP, AllocationConfig, BudgetPlan, allocate, allocate_ada,
                               allocate_headkv, allocate_pyramid, allocate_uniform,
                               clamp_to_sequence, headkv_targets, validate_plan)
from headkv.errors import HeadKVError
from headkv.importance import ImportanceScores


def scores(m):
    return ImportanceScores.from_raw(np.asarray(m, dtype=float))


def test_headkv_worked_example():
    s = scores([[0.5, 0.25], [0.25, 0.0]])
    np.testing.assert_allclose(headkv_targets(s.normalized, 8, 2), [[12, 8], [8, 4]])
    plan = allocate_headkv(s, AllocationConfig(b=8, beta=2))
    assert plan.per_head.tolist() == [[12, 8], [8, 4]] and plan.total == 32


def test_uniform_scores_give_b_everywhere():
    s = scores(np.ones((3, 4)))
    for beta in BETA_SWEEP:
        assert np.all(allocate_headkv(s, AllocationConfig(b=16, beta=beta)).per_head == 16)


def test_huge_beta_ignores_scores():
    s = scores([[0.9, 0.1], [0.0, 0.0]])
    assert np.all(allocate_headkv(s, AllocationConfig(b=64, beta=1e6)).per_head == 64)


def test_uniform_policy():
    assert allocate_uniform(AllocationConfig(b=128), 32, 32).total == 131072
    assert np.all(allocate_uniform(AllocationConfig(b=1), 2, 3).per_head == 1)


@pytest.mark.parametrize("L, want", [(2, [12, 4]), (3, [12, 8, 4])])
def test_pyramid_examples(L, want):
    plan = allocate_pyramid(AllocationConfig(b=8, policy="pyramid"), L, 2)
    assert plan.per_head[:, 0].tolist() == want


@pytest.mark.parametrize("L", range(2, 9))
@pytest.mark.parametrize("H", range(1, 9))
def test_pyramid_conserves(L, H):
    for b in (1, 7, 64):
        plan = allocate_pyramid(AllocationConfig(b=b, policy="pyramid"), L, H)
        assert plan.total == b * L * H
        assert np.all(np.diff(plan.per_head.sum(axis=1)) <= 0)


def test_ada_examples():
    cfg = AllocationConfig(b=10, policy="ada")
    assert np.all(allocate_ada(cfg, np.ones((2, 3)), 2, 3).per_head == 10)
    plan = allocate_ada(cfg, np.array([[1.0, 0.0], [0.3, 0.7]]), 2, 2)
    assert plan.per_head[0].tolist() == [20, 0]
    assert plan.per_head.sum(axis=1).tolist() == [20, 20]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_ada_layer_sums(seed):
    gen = np.random.default_rng(seed)
    L, H, b = gen.integers(1, 6), gen.integers(1, 6), int(gen.integers(1, 300))
    conc = gen.random((L, H)) * (gen.random((L, H)) > 0.3)
    plan = allocate_ada(AllocationConfig(b=b, policy="ada"), conc, L, H)
    assert np.all(plan.per_head.sum(axis=1) == b * H)


def test_ada_from_pooled_scores():
    pooled = {(0, 0): np.array([5.0, 0, 0, 0]), (0, 1): np.array([1.0, 1, 1, 1])}
    plan = allocate_ada(AllocationConfig(b=2, policy="ada"), pooled, 1, 2)
    # top-2 mass: 5 vs 2
    assert plan.per_head.tolist() == [[3, 1]]


def test_clamp_examples():
    plan = BudgetPlan(np.array([[10, 6, 2]]), 2, np.array([[0.5, 0.3, 0.2]]))
    assert clamp_to_sequence(plan, 10).per_head.tolist() == [[8, 7, 3]]
    assert clamp_to_sequence(plan, 10).clamped
    assert clamp_to_sequence(plan, 10_000).per_head.tolist() == [[10, 6, 2]]
    assert clamp_to_sequence(plan, 5).per_head.tolist() == [[3, 3, 3]]
    assert clamp_to_sequence(plan, 3).per_head.tolist() == [[1, 1, 1]]
    with pytest.raises(HeadKVError):
        clamp_to_sequence(plan, 1)


def test_validate_plan():
    gen = np.random.default_rng(0)
    s = ImportanceScores.from_raw(gen.random((4, 4)))
    cfg = AllocationConfig(b=32, beta=1.5)
    plan = allocate_headkv(s, cfg)
    assert validate_plan(plan, cfg, 4, 4).passed
    bad = BudgetPlan(plan.per_head.copy(), plan.alpha, plan.weights)
    bad.per_head[0, 0] += 1
    rep = validate_plan(bad, cfg, 4, 4)
    assert not rep.passed and not rep.checks["conservation"]
    flipped = BudgetPlan(plan.per_head[::-1, ::-1].copy(), plan.alpha, plan.weights)
    assert not validate_plan(flipped, cfg, 4, 4).checks["monotonicity"]


def test_sorted_scores_give_sorted_budgets():
    s = ImportanceScores.from_raw(np.linspace(1, 0, 16).reshape(4, 4))
    plan = allocate_headkv(s, AllocationConfig(b=20, beta=5))
    assert np.all(np.diff(plan.per_head.ravel()) <= 0)


def test_config_errors():
    for kw in ({"b": 0}, {"beta": 1.0}, {"alpha": -1}, {"policy": "x"}):
        with pytest.raises(HeadKVError):
            AllocationConfig(**kw)
    with pytest.raises(HeadKVError):
        allocate(AllocationConfig(), (2, 2))
    with pytest.raises(HeadKVError):
        allocate_pyramid(AllocationConfig(policy="pyramid"), 1, 4)


def test_plan_roundtrip():
    plan = allocate_uniform(AllocationConfig(b=3), 2, 2)
    back = BudgetPlan.from_dict(json.loads(plan.to_json()))
    assert np.array_equal(back.per_head, plan.per_head) and back.alpha == plan.alpha
    assert plan.heatmap_csv() == "3,3\n3,3\n"
