from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popmajority import engine
from popmajority.analysis import (
    broadcast_expected,
    broadcast_expected_by_stages,
    four_state_markov_oracle,
    simulate_broadcast,
)
from popmajority.protocols import make_protocol
from popmajority.protocols.base import INFORMED, UNINFORMED, broadcast_delta


def test_broadcast_rule():
    assert broadcast_delta(INFORMED, UNINFORMED) == (INFORMED, INFORMED)
    assert broadcast_delta(UNINFORMED, INFORMED) == (INFORMED, INFORMED)
    assert broadcast_delta(UNINFORMED, UNINFORMED) == (UNINFORMED, UNINFORMED)


def test_broadcast_expected_small():
    assert broadcast_expected(2) == 1
    assert broadcast_expected(3) == 3
    with pytest.raises(ValueError):
        broadcast_expected(1)


@given(st.integers(2, 300))
def test_closed_form_matches_stage_sum(n):
    assert broadcast_expected(n) == broadcast_expected_by_stages(n)


def test_broadcast_two_nodes_is_one_interaction():
    assert set(simulate_broadcast(2, 100, seed=4).tolist()) == {1}


def test_broadcast_three_nodes_mean():
    times = simulate_broadcast(3, 1_000_000, seed=12)
    assert abs(times.mean() / 3.0 - 1) < 0.01


def test_broadcast_is_deterministic():
    assert np.array_equal(simulate_broadcast(50, 20, seed=3), simulate_broadcast(50, 20, seed=3))


def test_oracle_three_nodes():
    res = four_state_markov_oracle(3, 2)
    assert res.expected == Fraction(9, 2)
    rec = res.to_record()
    assert rec["expected"] == "9/2" and rec["expected_decimal"] == "4.500000000000"
    # first-step analysis: from (A,A,B) wait 3/2 for the cancel, then 3 for the last conversion
    assert res.expected_by_state[(1, 0, 1, 1)] == 3


def test_oracle_trivial_and_rejections():
    assert four_state_markov_oracle(2, 2).expected == 0
    assert four_state_markov_oracle(5, 0).expected == 0
    with pytest.raises(ValueError):
        four_state_markov_oracle(9, 5)
    with pytest.raises(ValueError):
        four_state_markov_oracle(4, 2)


def test_oracle_symmetric_in_opinion():
    for n in range(3, 9):
        for a0 in range(n + 1):
            if 2 * a0 != n:
                assert four_state_markov_oracle(n, a0).expected == four_state_markov_oracle(n, n - a0).expected


@pytest.mark.parametrize("n,a0", [(3, 2), (4, 3), (5, 3)])
def test_oracle_matches_simulation(n, a0):
    runs = 200_000
    ms = engine.run_many(make_protocol("fourstate", n), engine.InputInstance(n, a0, n - a0), seed=21, runs=runs)
    mean = np.mean([m.stabilization_interactions for m in ms])
    assert abs(mean / float(four_state_markov_oracle(n, a0).expected) - 1) < 0.02
