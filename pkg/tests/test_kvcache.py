import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qinfer.errors import CapacityExceeded, InvalidConfig, ShapeError
from qinfer.kvcache import KvCache, NaiveKvCache, kv_append, kv_new, kv_view


def numpy_buffers_allocated(fn) -> tuple[int, int]:
    """(new live numpy data buffers, bytes) left behind by ``fn``."""
    only_numpy = [tracemalloc.DomainFilter(True, np.lib.tracemalloc_domain)]
    tracemalloc.start()
    try:
        before = tracemalloc.take_snapshot().filter_traces(only_numpy)
        fn()
        after = tracemalloc.take_snapshot().filter_traces(only_numpy)
    finally:
        tracemalloc.stop()
    diff = after.compare_to(before, "filename")
    return sum(max(0, d.count_diff) for d in diff), sum(d.size_diff for d in diff)


def test_new_cache():
    c = kv_new(2, 2, 4, 8)
    assert c.len == 0 and c.capacity == 8
    assert c.nbytes == 2 * 2 * 8 * 2 * 4 * 4
    k, v = kv_view(c, 1)
    assert k.shape == (0, 2, 4) and v.shape == (0, 2, 4)
    assert kv_new(1, 1, 2, 1).capacity == 1


@pytest.mark.parametrize("dims", [(0, 2, 4, 8), (2, 0, 4, 8), (2, 2, 0, 8), (2, 2, 4, 0)])
def test_zero_dims_rejected(dims):
    with pytest.raises(InvalidConfig):
        kv_new(*dims)


def test_append_positions_and_len():
    c = kv_new(2, 2, 4, 4)
    k = np.ones((2, 4), np.float32)
    assert kv_append(c, 0, k, k) == 0
    assert c.len == 0  # layer 1 not yet written for this token
    assert kv_append(c, 1, k, k) == 0
    assert c.len == 1


def test_capacity_exceeded():
    c = kv_new(1, 1, 2, 1)
    kv_append(c, 0, np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(CapacityExceeded):
        kv_append(c, 0, np.zeros((1, 2)), np.zeros((1, 2)))


def test_bad_layer_and_shape():
    c = kv_new(2, 2, 4, 4)
    with pytest.raises(IndexError):
        kv_view(c, 2)
    with pytest.raises(IndexError):
        kv_append(c, -1, np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        kv_append(c, 0, np.zeros((2, 3)), np.zeros((2, 3)))


def test_views_are_read_only_and_zero_copy():
    c = kv_new(1, 2, 4, 8)
    for t in range(3):
        kv_append(c, 0, np.full((2, 4), t), np.full((2, 4), -t))
    k, v = kv_view(c, 0)
    assert k.shape == (3, 2, 4)
    assert not k.flags.writeable
    assert np.shares_memory(k, kv_view(c, 0)[0])
    with pytest.raises(ValueError):
        k[0] = 1


def test_appends_allocate_nothing_and_keep_addresses(rng):
    c = kv_new(2, 2, 8, 128)
    data = rng.normal(size=(100, 2, 2, 2, 8)).astype(np.float32)
    ptrs = [kv_view(c, l)[0].__array_interface__["data"][0] for l in range(2)]

    def fill():
        for t in range(100):
            for l in range(2):
                c.append(l, data[t, l, 0], data[t, l, 1])

    count, size = numpy_buffers_allocated(fill)
    assert (count, size) == (0, 0)
    assert c.allocations == 4
    assert [kv_view(c, l)[0].__array_interface__["data"][0] for l in range(2)] == ptrs


def test_naive_cache_does_allocate():
    c = NaiveKvCache(1, 2, 4)
    count, size = numpy_buffers_allocated(lambda: [c.append(0, np.ones((2, 4)), np.ones((2, 4))) for _ in range(10)])
    assert count > 0 and size > 0
    assert c.allocations == 20


def test_prefix_bytes_never_change(rng):
    c = kv_new(1, 2, 4, 32)
    snapshots = []
    for t in range(32):
        c.append(0, rng.normal(size=(2, 4)), rng.normal(size=(2, 4)))
        snapshots.append(kv_view(c, 0)[0].tobytes())
    final = kv_view(c, 0)[0].tobytes()
    for t, s in enumerate(snapshots):
        assert final[: len(s)] == s, t


def test_reset():
    c = kv_new(1, 1, 2, 2)
    c.append(0, np.ones((1, 2)), np.ones((1, 2)))
    c.reset()
    assert c.len == 0
    assert c.append(0, np.ones((1, 2)), np.ones((1, 2))) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 100))
def test_matches_naive_reference(seed, layers, steps):
    rng = np.random.default_rng(seed)
    a, b = KvCache(layers, 2, 4, 100), NaiveKvCache(layers, 2, 4)
    for _ in range(steps):
        for l in range(layers):
            k, v = rng.normal(size=(2, 2, 4)).astype(np.float32)
            assert a.append(l, k, v) == b.append(l, k, v)
    assert a.len == b.len == steps
    for l in range(layers):
        for x, y in zip(a.view(l), b.view(l)):
            np.testing.assert_array_equal(x, y)
