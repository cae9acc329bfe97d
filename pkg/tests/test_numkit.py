import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from headkv.errors import HeadKVError
from headkv.numkit import (SeededRng, derive_seed, largest_remainder, masked_softmax, matmul,
                           softmax, top_k_indices)

finite = st.floats(-50, 50, allow_nan=False)


@pytest.mark.parametrize("v, want", [
    ([0, 0], [0.5, 0.5]),
    ([math.log(2), 0], [2 / 3, 1 / 3]),
    ([1000, 1000], [0.5, 0.5]),
])
def test_softmax_examples(v, want):
    np.testing.assert_allclose(softmax(v), want, atol=1e-15)


@settings(max_examples=500, deadline=None)
@given(arrays(np.float64, st.integers(1, 16), elements=finite))
def test_softmax_is_a_distribution(v):
    p = softmax(v)
    assert np.all(p > 0) and np.all(p <= 1)
    assert abs(p.sum() - 1) <= 1e-12


def test_softmax_sums_to_one_on_10k_random_vectors():
    gen = np.random.default_rng(0)
    for _ in range(10_000):
        v = gen.normal(0, 20, gen.integers(1, 64))
        p = softmax(v)
        assert abs(p.sum() - 1) <= 1e-12 and p.min() > 0 and p.max() <= 1


@given(arrays(np.float64, st.integers(2, 12), elements=finite, unique=True))
def test_softmax_preserves_order(v):
    # weak order: inputs closer than float resolution may map to equal outputs
    p = softmax(v)[np.argsort(v)]
    assert np.all(np.diff(p) >= 0)


@pytest.mark.parametrize("bad", [[], [np.nan, 1.0], [np.inf]])
def test_softmax_rejects_bad_input(bad):
    with pytest.raises(HeadKVError):
        softmax(bad)


def test_masked_softmax_zeroes_masked_entries():
    x = np.array([[1.0, 2.0, 3.0]])
    p = masked_softmax(x, np.array([[True, False, True]]))
    assert p[0, 1] == 0
    np.testing.assert_allclose(p[0, [0, 2]], softmax([1.0, 3.0]))


@pytest.mark.parametrize("v, k, want", [
    ([0.1, 0.9, 0.3, 0.5], 2, [1, 3]),
    ([0.5, 0.5], 1, [0]),
    ([3, 1, 2], 3, [0, 2, 1]),
])
def test_top_k_examples(v, k, want):
    assert top_k_indices(v, k).tolist() == want


def test_top_k_too_many():
    with pytest.raises(HeadKVError):
        top_k_indices([1, 2], 3)


def test_matmul_examples():
    m = np.array([[2.0, -1.0], [0.5, 3.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])
    np.testing.assert_array_equal(matmul(np.zeros((2, 2)), m), np.zeros((2, 2)))
    with pytest.raises(HeadKVError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_rng_streams_are_reproducible_and_distinct():
    a, b = SeededRng(42), SeededRng(42)
    assert np.array_equal(a.next_u64(100), b.next_u64(100))
    assert not np.array_equal(SeededRng(1).next_u64(8), SeededRng(2).next_u64(8))
    assert derive_seed(3, 1, 2) != derive_seed(3, 2, 1)


def test_rng_known_splitmix_values():
    # reference outputs of SplitMix64 seeded with 0
    assert SeededRng(0).next_u64(2).tolist() == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4]


def test_rng_ranges():
    r = SeededRng(9)
    u = r.uniform(5000)
    assert u.min() >= 0 and u.max() < 1 and abs(u.mean() - 0.5) < 0.02
    ints = r.integers(3, 7, 2000)
    assert set(ints.tolist()) == {3, 4, 5, 6}
    assert sorted(r.permutation(10).tolist()) == list(range(10))
    s = r.sample(20, 5)
    assert len(set(s.tolist())) == 5 and s.max() < 20


def test_rng_child_does_not_advance_parent():
    r = SeededRng(5)
    r.child(1).next_u64(3)
    assert np.array_equal(r.next_u64(3), SeededRng(5).next_u64(3))


def test_largest_remainder_examples():
    assert largest_remainder([1.5, 1.5, 1.0], 4).tolist() == [2, 1, 1]
    assert largest_remainder([1.5, 1.5, 1.0], 4, priority=[0, 1, 0]).tolist() == [1, 2, 1]
    assert largest_remainder([0.2, 0.3, 0.5], 1).tolist() == [0, 0, 1]
    with pytest.raises(HeadKVError):
        largest_remainder([1.0, 1.0], 5)
    with pytest.raises(HeadKVError):
        largest_remainder([-1.0, 2.0], 1)


@given(st.lists(st.floats(0, 1000, allow_nan=False), min_size=1, max_size=40))
def test_largest_remainder_conserves_and_stays_within_one(t):
    total = int(round(sum(np.round(t, 9))))
    lo = int(np.floor(np.round(t, 9)).sum())
    total = min(max(total, lo), lo + len(t))
    out = largest_remainder(t, total)
    assert out.sum() == total
    assert np.all(np.abs(out - np.asarray(t)) < 1 + 1e-9)
