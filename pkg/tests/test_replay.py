import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spritelab.replay import PrioritizedReplay, SumTree, UniformReplay


def filled(priorities, capacity=None, **kw):
    rb = PrioritizedReplay(capacity or len(priorities), **kw)
    for i, p in enumerate(priorities):
        rb.add({"i": np.int64(i)}, priority=p)
    return rb


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=40))
def test_sum_tree_root_is_total(values):
    tree = SumTree(len(values))
    for i, v in enumerate(values):
        tree.update(i, v)
    assert tree.total == pytest.approx(sum(values))


@pytest.mark.parametrize("capacity", [8, 13])
def test_sum_tree_find_partitions_by_value(capacity):
    # each leaf owns a set of cumulative values whose total length is its value
    # (in index order only when the capacity is a power of two)
    rng = np.random.default_rng(0)
    values = rng.uniform(0, 5, size=capacity)
    values[4] = 0.0
    tree = SumTree(capacity)
    for i, v in enumerate(values):
        tree.update(i, v)
    grid = (np.arange(200_000) + 0.5) / 200_000 * tree.total
    owned = np.bincount([tree.find(c) for c in grid], minlength=capacity) * tree.total / len(grid)
    assert owned == pytest.approx(values, abs=1e-3)
    if capacity == 8:
        edges = np.cumsum(values)
        for c in grid[::997]:
            assert tree.find(c) == int(np.searchsorted(edges, c, side="right"))


def test_sampling_frequencies_follow_priorities():
    pri = np.array([1.0, 2.0, 3.0, 4.0, 0.5])
    rb = filled(pri)
    rng = np.random.default_rng(0)
    counts = np.zeros(len(pri))
    for _ in range(4000):
        idx, _, _ = rb.sample(16, rng)
        np.add.at(counts, idx, 1)
    assert counts / counts.sum() == pytest.approx(pri / pri.sum(), abs=0.005)


def test_alpha_zero_is_uniform():
    rb = filled([1.0, 100.0, 5.0], alpha=0.0)
    assert rb.probabilities([0, 1, 2]) == pytest.approx([1 / 3] * 3)


def test_importance_weights_normalised_by_max():
    rb = filled([1.0, 2.0, 4.0, 1e-9])
    w = rb.importance_weights([0, 1, 2])
    assert w == pytest.approx([1.0, 0.5, 0.25])
    # the batch maximum sets the scale, not the lowest priority in the buffer
    assert rb.importance_weights([1, 2]) == pytest.approx([1.0, 0.5])
    idx, _, w = rb.sample(4, np.random.default_rng(0))
    assert w.max() == 1.0
    assert w * rb.probabilities(idx) == pytest.approx(np.full(len(idx), w[0] * rb.probabilities(idx)[0]))


def test_weighted_loss_is_unbiased():
    # fixed synthetic replay: per-record losses and unrelated priorities
    rng = np.random.default_rng(0)
    n = 200
    losses = rng.gamma(2.0, 1.0, size=n)
    pri = rng.uniform(0.1, 10.0, size=n)
    rb = filled(pri)
    uniform_mean = losses.mean()
    total = 0.0
    draws = 0
    while draws < 100_000:
        idx, _, _ = rb.sample(100, rng)
        w = rb.importance_weights(idx, normalize=False)
        total += np.sum(w * losses[idx])
        draws += len(idx)
    estimate = total / draws
    assert abs(estimate - uniform_mean) / uniform_mean < 0.02


def test_priority_update_is_exact():
    rb = filled([1.0, 1.0, 1.0, 1.0])
    rng = np.random.default_rng(0)
    idx, _, _ = rb.sample(4, rng)
    fresh = np.array([0.3, 7.25, 1e-3, 2.5])[: len(idx)]
    rb.update_priorities(idx, fresh)
    latest = {}
    for i, p in zip(idx, fresh):
        latest[int(i)] = p
    for i, p in latest.items():
        assert rb.priorities[i] == p


def test_new_records_get_max_priority():
    rb = PrioritizedReplay(10)
    rb.add({"i": np.int64(0)}, priority=3.0)
    rb.update_priorities([0], [9.0])
    j = rb.add({"i": np.int64(1)})
    assert rb.priorities[j] == 9.0


def test_non_finite_priority_rejected():
    rb = filled([1.0])
    with pytest.raises(FloatingPointError):
        rb.update_priorities([0], [np.nan])


def test_capacity_and_fifo_eviction():
    rb = PrioritizedReplay(5)
    for i in range(12):
        rb.add({"i": np.int64(i), "obj": [i]})
        assert len(rb) <= 5
    stored = sorted(rb._storage.fields["i"][: len(rb)])
    assert stored == [7, 8, 9, 10, 11]
    assert rb.tree.total == pytest.approx(rb.priorities.sum())


def test_sampling_empty_replay_fails():
    with pytest.raises(ValueError):
        PrioritizedReplay(3).sample(1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        UniformReplay(3).sample(1, np.random.default_rng(0))


def test_uniform_replay_capacity_and_uniformity():
    rb = UniformReplay(50)
    for i in range(120):
        rb.add({"i": np.int64(i)})
    assert len(rb) == 50
    counts = np.bincount(rb.sample(50_000, np.random.default_rng(0))["i"] - 70, minlength=50)
    assert counts.min() > 850 and counts.max() < 1150


def test_concurrent_writers_respect_capacity():
    rb = PrioritizedReplay(64)

    def write(k):
        for i in range(500):
            rb.add({"i": np.int64(k * 1000 + i)}, priority=float(i % 7 + 1))

    threads = [threading.Thread(target=write, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(rb) == 64
    assert rb.tree.total == pytest.approx(rb.priorities.sum())
