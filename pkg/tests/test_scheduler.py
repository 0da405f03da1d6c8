import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from popmajority import rng
from popmajority.engine import schedule_pair


def test_two_nodes_always_pair_zero_one():
    s = rng.make_state(5)
    pairs = rng.draw_pairs(s, 2, 1000)
    assert set(map(tuple, pairs)) == {(0, 1), (1, 0)}


@pytest.mark.parametrize("n", [4, 16])
def test_unordered_pairs_uniform(n):
    draws = 1_000_000
    pairs = rng.draw_pairs(rng.make_state(2024, 1), n, draws)
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    idx = lo * n + hi
    counts = np.bincount(idx, minlength=n * n)
    cells = [counts[i * n + j] for i in range(n) for j in range(i + 1, n)]
    assert sum(cells) == draws
    assert chisquare(cells).pvalue > 0.001
    if n == 4:
        freqs = np.array(cells) / draws
        assert np.all(np.abs(freqs - 1 / 6) < 0.01)


def test_orderings_equiprobable():
    pairs = rng.draw_pairs(rng.make_state(77), 4, 400_000)
    forward = np.sum(pairs[:, 0] < pairs[:, 1])
    assert chisquare([forward, len(pairs) - forward]).pvalue > 0.001


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), stream=st.integers(0, 1000), n=st.integers(2, 5000))
def test_same_seed_same_sequence(seed, stream, n):
    a = rng.draw_pairs(rng.make_state(seed, stream), n, 200)
    b = rng.draw_pairs(rng.make_state(seed, stream), n, 200)
    assert np.array_equal(a, b)
    assert np.all(a[:, 0] != a[:, 1])
    assert a.min() >= 0 and a.max() < n


def test_streams_differ():
    a = rng.draw_pairs(rng.make_state(1, 0), 1000, 50)
    b = rng.draw_pairs(rng.make_state(1, 1), 1000, 50)
    assert not np.array_equal(a, b)


def test_schedule_pair_advances_state_only():
    s = rng.make_state(9)
    t = s.copy()
    i, j = schedule_pair(s, 10)
    assert i != j and 0 <= i < 10 and 0 <= j < 10
    assert not np.array_equal(s, t)
    assert (i, j) == tuple(rng.draw_pairs(t, 10, 1)[0])


def test_seed_range_checked():
    with pytest.raises(ValueError):
        rng.make_state(-1)
    with pytest.raises(ValueError):
        rng.make_state(2**64)
    with pytest.raises(ValueError):
        rng.make_state(0, -1)


def test_stream_rule_is_seed_sequence():
    expected = np.random.SeedSequence(entropy=42, spawn_key=(3,)).generate_state(4, np.uint64)
    assert np.array_equal(rng.make_state(42, 3), expected)
