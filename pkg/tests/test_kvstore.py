import json

import numpy as np
import pytest

from headkv.errors import HeadKVError
from headkv.kvstore import HeadCache, HeadId, append, evict_to, head_ids, memory_report


def cache(s=4, d=3):
    k = np.arange(s * d, dtype=float).reshape(s, d)
    return HeadCache.from_full(k, -k)


def test_retain_all_is_identity():
    c = cache()
    e = evict_to(c, range(4))
    assert np.array_equal(e.keys, c.keys) and np.array_equal(e.positions, c.positions)


def test_retain_nothing():
    e = evict_to(cache(3), [])
    assert e.size == 0 and e.keys.shape == (0, 3)


def test_retain_subset_keeps_order_and_positions():
    c = cache()
    e = evict_to(c, [2, 0, 2])
    assert e.positions.tolist() == [0, 2]
    assert np.array_equal(e.keys, c.keys[[0, 2]])
    assert np.array_equal(e.values, c.values[[0, 2]])
    # indices are into the cache, so a second eviction maps through positions
    assert evict_to(e, [1]).positions.tolist() == [2]


def test_retain_out_of_range():
    with pytest.raises(HeadKVError):
        evict_to(cache(), [4])


def test_append():
    c = HeadCache.from_full(np.zeros((0, 2)), np.zeros((0, 2)))
    c = append(c, [1, 2], [3, 4], 0)
    assert c.size == 1
    for p in (3, 4, 7, 9):
        c = append(c, [0, 0], [0, 0], p)
    assert c.positions.tolist() == [0, 3, 4, 7, 9]
    with pytest.raises(HeadKVError):
        append(c, [0, 0], [0, 0], 9)


def test_positions_must_increase():
    with pytest.raises(HeadKVError):
        HeadCache(np.zeros((2, 1)), np.zeros((2, 1)), np.array([3, 3]))


def test_memory_report_arithmetic():
    caches = {h: evict_to(HeadCache.positions_only(1024), range(16)) for h in head_ids(2, 2)}
    r = memory_report(caches, 1024, alpha=8)
    assert r.total_entries == 64
    assert r.compression_ratio == 64 / 4096
    assert r.budget_entries == 32
    assert r.bytes(16) == 64 * 2 * 16 * 8
    assert all(v == 16 / 1024 for v in r.per_head_ratio.values())


def test_memory_report_full_and_empty():
    full = {h: HeadCache.positions_only(10) for h in head_ids(1, 3)}
    assert memory_report(full, 10).compression_ratio == 1.0
    empty = {h: HeadCache.positions_only(0) for h in head_ids(1, 3)}
    assert memory_report(empty, 0).compression_ratio == 0.0
    with pytest.raises(HeadKVError):
        memory_report(full, 5)


def test_report_serialisation():
    caches = {HeadId(0, 0): HeadCache.positions_only(3), HeadId(0, 1): evict_to(HeadCache.positions_only(3), [1])}
    r = memory_report(caches, 3)
    assert r.to_csv() == "headId,entries\nL0H0,3\nL0H1,1\n"
    assert json.loads(r.to_json())["per_head_entries"] == {"L0H0": 3, "L0H1": 1}
