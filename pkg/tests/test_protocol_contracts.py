"""Contracts every protocol must meet: symmetry, total output, lossless encodings."""

import random

import numpy as np
import pytest

from conftest import instance, reachable_states
from popmajority import engine
from popmajority.protocols import PROTOCOLS, make_protocol

N = 32
_CACHE = {}


def states_of(name):
    if name not in _CACHE:
        p = make_protocol(name, N)
        _CACHE[name] = (p, reachable_states(p, n_runs=2, seed=17, limit=400_000))
    return _CACHE[name]


@pytest.mark.parametrize("name", PROTOCOLS)
def test_symmetry_on_reachable_pairs(name):
    p, states = states_of(name)
    rnd = random.Random(3)
    pairs = [(rnd.choice(states), rnd.choice(states)) for _ in range(20_000)]
    checked = 0
    for s1, s2 in pairs:
        if p.is_asymmetric(s1, s2) or p.is_asymmetric(s2, s1):
            continue
        r1, r2 = p.transition(s1, s2)
        assert p.transition(s2, s1) == (r2, r1), (p.encode(s1), p.encode(s2))
        checked += 1
    assert checked > 10_000


def test_fastmajority2_declares_only_the_init_rule_asymmetric():
    from popmajority.protocols.fastmajority2 import pack_clock, pack_unassigned, pack_worker
    p = make_protocol("fastmajority2", N, extended=False)
    ua, ub = pack_unassigned(0), pack_unassigned(1)
    assert p.is_asymmetric(ua, ub) and p.is_asymmetric(ua, ua)
    assert not p.is_asymmetric(ua, pack_worker(token=1))
    assert not p.is_asymmetric(pack_clock(3), pack_clock(4))
    # the declared rule really is ordered: the initiator becomes the clock
    r = p.transition(ua, ua)
    assert p.transition(ua, ua) == r and r[0] != r[1]


@pytest.mark.parametrize("name", PROTOCOLS)
def test_exhaustive_small_state_symmetry(name):
    """All ordered pairs over the states of a tiny run."""
    p = make_protocol(name, 6)
    states = reachable_states(p, n_runs=1, seed=2, limit=50_000)[:300]
    for s1 in states:
        for s2 in states:
            if p.is_asymmetric(s1, s2) or p.is_asymmetric(s2, s1):
                continue
            r1, r2 = p.transition(s1, s2)
            assert p.transition(s2, s1) == (r2, r1)


@pytest.mark.parametrize("name", PROTOCOLS)
def test_encode_decode_round_trip(name):
    p, states = states_of(name)
    for s in states:
        text = p.encode(s)
        assert p.decode(text) == s, text


@pytest.mark.parametrize("name", PROTOCOLS)
def test_output_total(name):
    p, states = states_of(name)
    assert all(p.output(s) in (0, 1) for s in states)


@pytest.mark.parametrize("name", PROTOCOLS)
def test_decode_rejects_garbage(name):
    p, _ = states_of(name)
    with pytest.raises(ValueError):
        p.decode("nonsense")


def test_unknown_protocol_rejected():
    with pytest.raises(ValueError):
        make_protocol("plurality", 10)
    with pytest.raises(ValueError):
        make_protocol("fourstate", 10, C=3)
