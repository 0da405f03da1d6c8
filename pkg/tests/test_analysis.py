"""Critical phase, invariant monitors, concentration and the state audit."""

from fractions import Fraction
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import instance
from popmajority import engine
from popmajority.analysis import (
    EpochStartMonitor,
    InvariantReport,
    check_concentration,
    check_epoch_invariant,
    check_phase_invariant1,
    critical_phase,
    interaction_counts,
    state_audit,
    window_counts,
)
from popmajority.analysis.audit import AuditRow, fast_components, fit_growth
from popmajority.protocols import make_protocol
from popmajority.protocols.fastmajority1 import pack_state


# ------------------------------------------------------------------ critical phase


def test_critical_phase_examples():
    assert critical_phase(30, 21, 9).p_c == 0  # gap 12 > 10
    assert critical_phase(12, 7, 6).p_c == 3
    cp = critical_phase(1024, 513, 511)
    assert cp.p_c == 8
    assert (cp.epoch, cp.phase_in_epoch, cp.phases_per_epoch) == (2, 2, 3)


def test_critical_phase_boundary_is_strict():
    # 2^p * gap must exceed n/3, not equal it
    assert critical_phase(12, 4, 0).p_c == 1
    assert critical_phase(12, 5, 0).p_c == 0


def test_critical_phase_rejects_ties():
    with pytest.raises(ValueError):
        critical_phase(10, 5, 5)
    with pytest.raises(ValueError):
        critical_phase(10, -1, 3)


@given(n=st.integers(2, 1 << 30), g1=st.integers(1, 1 << 30), g2=st.integers(1, 1 << 30))
def test_critical_phase_monotone_in_gap(n, g1, g2):
    lo, hi = sorted((g1, g2))
    assert critical_phase(n, hi, 0).p_c <= critical_phase(n, lo, 0).p_c


@given(n1=st.integers(2, 1 << 30), n2=st.integers(2, 1 << 30), g=st.integers(1, 1 << 20))
def test_critical_phase_monotone_in_n(n1, n2, g):
    lo, hi = sorted((n1, n2))
    assert critical_phase(lo, g, 0).p_c <= critical_phase(hi, g, 0).p_c


@given(n=st.integers(2, 1 << 30), g=st.integers(1, 1 << 30))
def test_critical_phase_is_the_smallest(n, g):
    p = critical_phase(n, g, 0).p_c
    assert 3 * g * 2 ** p > n
    assert p == 0 or 3 * g * 2 ** (p - 1) <= n


# ------------------------------------------------------------------ epoch / phase invariants

N = 64
FM1 = make_protocol("fastmajority1", N)
FAST1 = FM1.fast
PR = FM1.params


def config_of(fast_states, protocol=FM1):
    s = np.asarray(fast_states, dtype=np.int64)
    if protocol.extended:
        s = s << 2
    return engine.Configuration(s)


def test_epoch_invariant_holds_initially():
    rep = check_epoch_invariant(engine.Configuration(FM1.initial(instance(N))), 0, FM1)
    assert rep.passed and rep.measured["normal_in_epoch"] == N


def test_epoch_invariant_rejects_mid_epoch_stragglers():
    half = N // 2
    states = [pack_state(0, 1, 0, 0)] * half + [pack_state(0, 0, 0, PR.epoch_len // 2)] * half
    rep = check_epoch_invariant(config_of(states), 1, FM1)
    assert not rep.passed
    assert not rep.measured["clause1"] and not rep.measured["clause2"]
    assert rep.measured["violating"] == half
    assert len(rep.violations) == min(half, 20)


def test_epoch_invariant_accepts_last_quarter_stragglers():
    k = 1  # at n=64, clause 1 leaves room for a single node outside the core
    late = pack_state(0, 0, 0, (3 * PR.epoch_len) // 4 + 1)
    states = [pack_state(0, 1, 0, 2)] * (N - k) + [late] * k
    rep = check_epoch_invariant(config_of(states), 1, FM1)
    assert rep.passed, rep.measured


def test_epoch_invariant_on_unsupported_protocol():
    maj = make_protocol("majority", N)
    rep = check_epoch_invariant(engine.Configuration(maj.initial(instance(N))), 0, maj)
    assert not rep.passed and "FastMajority1" in rep.note


def test_phase0_matches_epoch_clause1_at_epoch_start():
    cfg = engine.Configuration(FM1.initial(instance(N)))
    ep = check_epoch_invariant(cfg, 0, FM1)
    ph = check_phase_invariant1(cfg, 0, 0, FM1)
    assert ph.passed and ph.measured["clause1"] == ep.measured["clause1"]
    assert ph.measured["W"] == N and ph.measured["stray_value"] == 0


def test_phase_invariant_single_stray_token():
    j = 0
    stray = pack_state(1, j, PR.P, PR.first_part_len + 3)  # age P in epoch j: value 1 relative to epoch end
    states = [pack_state(0, j, 0, 1)] * (N - 1) + [stray]
    rep = check_phase_invariant1(config_of(states), j, 0, FM1)
    assert rep.measured["U"] == 1 and rep.measured["U_tokens"] == 1
    assert rep.measured["stray_value"] == Fraction(1)
    assert rep.measured["stray_per_node"] == Fraction(1, N)


def test_phase_index_checked():
    cfg = engine.Configuration(FM1.initial(instance(N)))
    with pytest.raises(ValueError):
        check_phase_invariant1(cfg, 0, PR.P + 1, FM1)


def test_report_json_round_trip():
    rep = check_epoch_invariant(engine.Configuration(FM1.initial(instance(N))), 0, FM1)
    rec = json.loads(rep.to_json())
    assert rec["invariant"] == "EpochInvariant" and rec["passed"] is True
    assert rec["thresholds"]["min_normal_in_epoch"] == str(rep.thresholds["min_normal_in_epoch"])
    assert isinstance(rep, InvariantReport)


@pytest.mark.slow
def test_epoch_monitor_in_a_run():
    n = 1024
    p = make_protocol("fastmajority1", n)
    mon = EpochStartMonitor(p)
    _, m, _ = engine.run(p, instance(n), seed=3, stream=0, monitor=mon)
    assert m.outcome == engine.CORRECT_DONE
    assert mon.reports and all(r.measured["epoch"] == k + 1 for k, r in enumerate(mon.reports))


def test_monitor_does_not_perturb_the_run():
    n = 256
    p = make_protocol("fastmajority1", n)
    a, ma, _ = engine.run(p, instance(n), seed=8, stream=2)
    b, mb, _ = engine.run(p, instance(n), seed=8, stream=2, monitor=EpochStartMonitor(p))
    assert np.array_equal(a.states, b.states) and ma.interactions == mb.interactions


# ------------------------------------------------------------------ concentration


def test_concentration_empty_window():
    rep = check_concentration(np.zeros(10, np.int64), 0, 10, 5.0, 4)
    assert rep.passed and rep.measured["max_deviation"] == 0


def test_concentration_silent_node():
    n, t = 8, 700
    others = n - 1
    pairs = [(k % others, (k + 1) % others) for k in range(t)]
    rep = check_concentration(window_counts(pairs), t, n, 1.0, 3)
    assert not rep.passed
    assert rep.measured["max_deviation"] == Fraction(2 * t, n)
    assert rep.measured["worst_node"] == n - 1


def test_concentration_counts_match_engine_pairs():
    n, t = 32, 5000
    _, _, tr = engine.run(make_protocol("fourstate", n), instance(n), seed=4, stream=1,
                          trace=True, max_interactions=t, trace_limit=t)
    replay = interaction_counts(n, 4, 1, 0, len(tr))
    assert np.array_equal(replay, np.bincount(np.stack([tr.i, tr.j]).ravel(), minlength=n))


def test_concentration_rejects_bad_totals():
    with pytest.raises(ValueError):
        check_concentration([1, 1, 1], 1, 3, 1.0, 2)


# ------------------------------------------------------------------ audit


def test_audit_fourstate_is_four():
    rep = state_audit("fourstate", [8, 16, 32], runs=2, seed=1)
    assert [r.states_seen for r in rep.rows] == [4, 4, 4]
    assert rep.exponent == pytest.approx(0.0, abs=1e-9)


def test_audit_extended_counts_fast_components():
    rep = state_audit("majority", [64, 128], runs=1, seed=3)
    fast_only = state_audit("majority", [64, 128], runs=1, seed=3, extended=False)
    for row, bare in zip(rep.rows, fast_only.rows):
        assert row.states_seen < row.full_states_seen <= 4 * row.states_seen
        assert bare.full_states_seen == bare.states_seen


def test_fast_components_drops_backup_bits():
    proto = make_protocol("majority", 64)
    assert fast_components(proto, [(5 << 2) | 1, (5 << 2) | 3, 6 << 2]) == {5, 6}
    bare = make_protocol("majority", 64, extended=False)
    assert fast_components(bare, [21, 23]) == {21, 23}


def test_fit_growth_recovers_exponents():
    rows = [AuditRow("x", 2 ** k, k, 1, 7 * k * k) for k in (10, 12, 14, 16)]
    rep = fit_growth(rows, "x")
    assert rep.exponent == pytest.approx(2.0)
    assert rep.fit_lam2 == pytest.approx(7.0)
    assert rep.ratios == pytest.approx(rep.lam2_ratios)
