"""Epoch/phase protocol: geometry, main-epoch rules, the additional epoch."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import instance
from popmajority import engine
from popmajority.protocols import make_protocol
from popmajority.protocols.base import DONE_A, DONE_B, FAIL, NORMAL
from popmajority.protocols.fastmajority1 import FM1Params, fm1_classify, pack_state, unpack

A, B, E = 1, 2, 0
N = 1024
FAST = make_protocol("fastmajority1", N, extended=False)
PR = FAST.params
FAIL_STATE = FAIL << 2


def fields(s):
    return unpack(s, PR)


def global_age(s):
    """Exponent g of the token value 1/2^g, read back from the classifier."""
    value = int(fm1_classify(np.int64(s), FAST.pv_tuple)[3])
    return PR.gmax - int(math.log2(abs(value)))


def test_geometry_at_1024():
    assert (PR.lam, PR.P) == (10, 3)
    assert PR.phase_len == PR.C * 4
    assert PR.first_part_len == 3 * PR.phase_len
    assert PR.epoch_len == 2 * PR.first_part_len
    assert PR.E_max == 6
    assert PR.tau == math.ceil(PR.C * 10 / 4)
    assert PR.cancel_len == math.ceil(PR.phase_len / 2)


@given(n=st.integers(2, 1 << 24), C=st.floats(2, 500))
def test_geometry_invariants(n, C):
    try:
        p = FM1Params(n, C)
    except ValueError:
        return
    assert p.epoch_len == 2 * p.first_part_len
    assert p.P == math.ceil(p.lam ** (1 / 3) - 1e-9)
    assert p.P ** 3 >= p.lam > (p.P - 1) ** 3
    assert p.c == pytest.approx(C ** 0.75)
    assert p.add_phases == 3 * p.P


def test_locate():
    L, F = PR.phase_len, PR.first_part_len
    assert PR.locate(0) == (0, 0, 0)
    assert PR.locate(L + 3) == (0, 1, 3)
    assert PR.locate(F) == (1, None, 0)
    with pytest.raises(ValueError):
        PR.locate(PR.epoch_len)


# ------------------------------------------------------------------ main epochs


def test_cancel_in_canceling_stage():
    st_ = PR.phase_len + 10  # phase 1, canceling
    a, b = FAST.transition(pack_state(A, 1, 1, st_, snapshots=(A, A, 0)),
                           pack_state(B, 1, 1, st_ + 2, snapshots=(B, B, 0)))
    fa, fb = fields(a), fields(b)
    assert fa["token"] == fb["token"] == "-"
    assert (fa["step"], fb["step"]) == (st_ + 1, st_ + 3)


def test_no_cancel_with_unequal_ages():
    st_ = PR.phase_len + 10
    a, b = FAST.transition(pack_state(A, 1, 1, st_), pack_state(B, 1, 2, st_, doubled=True))
    assert fields(a)["token"] == "A" and fields(b)["token"] == "B"


def test_double_in_doubling_stage():
    st_ = PR.cancel_len + 4  # phase 0, doubling
    a, b = FAST.transition(pack_state(A, 2, 0, st_), pack_state(E, 2, 0, st_))
    for f in (fields(a), fields(b)):
        assert (f["token"], f["age"], f["doubled"], f["out_of_sync"]) == ("A", 1, True, False)


def test_out_of_sync_split_any_stage():
    g = 1
    for st_ in (3, PR.cancel_len + 1, PR.first_part_len + 9):
        a, b = FAST.transition(pack_state(A, 1, g, st_, oos=True), pack_state(E, 1, 0, st_ + 1))
        for f in (fields(a), fields(b)):
            assert (f["token"], f["age"], f["out_of_sync"]) == ("A", g + 1, True)


def test_out_of_sync_tokens_never_cancel():
    a, b = FAST.transition(pack_state(A, 1, 1, 5, oos=True), pack_state(B, 1, 1, 5))
    assert fields(a)["token"] == "A" and fields(b)["token"] == "B"


def test_out_of_sync_clears_at_full_age_in_second_part():
    F = PR.first_part_len
    a, _ = FAST.transition(pack_state(A, 1, PR.P, F + 5, oos=True), pack_state(E, 1, 0, F + 5))
    assert not fields(a)["out_of_sync"]


def test_failed_doubling_sets_out_of_sync():
    L = PR.phase_len
    a, _ = FAST.transition(pack_state(A, 0, 0, L - 1), pack_state(A, 0, 0, L - 1))
    f = fields(a)
    assert f["out_of_sync"] and f["phase"] == 1


def test_time_tolerance():
    tau = PR.tau
    assert FAST.transition(pack_state(E, 0, 0, 0), pack_state(E, 0, 0, tau + 1)) == (FAIL_STATE, FAIL_STATE)
    a, b = FAST.transition(pack_state(E, 0, 0, 0), pack_state(E, 0, 0, tau))
    assert fields(a)["status"] == fields(b)["status"] == "normal"


def test_epoch_pull_up_rotates_snapshots():
    last = PR.epoch_len - 5
    a, b = FAST.transition(pack_state(A, 1, PR.P, last, snapshots=(A, B, 0)),
                           pack_state(E, 2, 0, 3, snapshots=(E, A, B)))
    fa = fields(a)
    assert (fa["epoch"], fa["age"], fa["step"]) == (2, 0, 1)
    assert fa["snapshots"] == ("A", "A", "B")


def test_short_token_at_epoch_end_triggers_additional_epoch():
    a, _ = FAST.transition(pack_state(A, 2, PR.P - 1, PR.epoch_len - 1, snapshots=(B, A, A)),
                           pack_state(E, 2, 0, PR.epoch_len - 1))
    f = fields(a)
    assert f["additional_epoch"] and f["epoch"] == 2
    assert f["token"] == "A"  # restored from the previous epoch's snapshot


def test_epoch_limit_fails():
    last = PR.epoch_len - 1
    top = PR.E_max - 1
    a, _ = FAST.transition(pack_state(E, top, 0, last), pack_state(E, top, 0, last))
    assert a == FAIL_STATE


# ------------------------------------------------------------------ additional epoch


def join(node, jf):
    trigger = pack_state(E, jf, additional=True)
    _, out = FAST.transition(trigger, node)
    return out


def test_restore_from_previous_snapshot():
    jf = 3
    out = join(pack_state(E, jf, 0, 100, snapshots=(E, A, A)), jf)
    f = fields(out)
    assert f["additional_epoch"] and f["token"] == "A"
    assert global_age(out) == (jf - 1) * PR.P


def test_restore_at_first_epoch_uses_input_token():
    out = join(pack_state(E, 0, 0, 40, snapshots=(B, E, E)), 0)
    assert fields(out)["token"] == "B" and global_age(out) == 0


def test_node_one_epoch_ahead_uses_oldest_snapshot():
    jf = 2
    out = join(pack_state(E, jf + 1, 0, 10, snapshots=(E, E, B)), jf)
    assert fields(out)["token"] == "B" and global_age(out) == (jf - 1) * PR.P


def test_node_too_far_ahead_fails():
    out = join(pack_state(E, 5, 0, 10, snapshots=(A, A, A)), 1)
    assert fields(out)["status"] == "fail"


def add_state(tok, jf, aphase, step, doubled=False):
    return pack_state(tok, jf, additional=True, aphase=aphase, epoch_step=step, doubled=doubled)


def test_additional_epoch_cancel():
    s = PR.add_part_lengths[0] + 3
    a, b = FAST.transition(add_state(A, 2, 1, s), add_state(B, 2, 1, s))
    assert fields(a)["token"] == fields(b)["token"] == "-"


def test_additional_epoch_failed_doubling_is_done():
    last = PR.add_phase_len - 1
    a, _ = FAST.transition(add_state(B, 2, 1, last), add_state(E, 2, 1, last))
    assert fields(a)["status"] == "done-B"


def test_additional_epoch_runs_out_of_phases():
    last = PR.add_phase_len - 1
    top = PR.add_phases - 1
    a, _ = FAST.transition(add_state(E, 2, top, last), add_state(E, 2, top, last))
    assert a == FAIL_STATE


def test_conflicting_final_epochs_fail():
    a, b = FAST.transition(add_state(E, 2, 0, 5), add_state(E, 3, 0, 5))
    assert a == b == FAIL_STATE


def test_done_spreads_through_additional_epoch_nodes():
    done = pack_state(A, 2, additional=True, status=DONE_A)
    _, b = FAST.transition(done, add_state(E, 2, 1, 7))
    assert fields(b)["status"] == "done-A"
    assert FAST.transition(done, pack_state(B, 2, additional=True, status=DONE_B)) == (FAIL_STATE, FAIL_STATE)


# ------------------------------------------------------------------ runs


@pytest.mark.parametrize("n,gap", [(64, 2), (256, 26), (1023, 1)])
def test_runs_conserve_and_finish_correct(n, gap):
    p = make_protocol("fastmajority1", n)
    for m in engine.run_many(p, instance(n, gap), seed=9, runs=4):
        assert m.conservation_violations == 0
        assert m.outcome in (engine.CORRECT_DONE, engine.ALL_FAIL_BACKUP)


def test_age_bounds_and_oos_has_token():
    n = 256
    p = make_protocol("fastmajority1", n, extended=False)
    _, _, tr = engine.run(p, instance(n), seed=4, stream=1, trace=True, trace_limit=20_000_000)
    after = np.unique(tr.after.ravel())
    for s in after:
        f = unpack(int(s), p.params)
        if f["status"] == "fail" or f["additional_epoch"]:
            continue
        assert 0 <= f["age"] <= p.params.P
        if f["out_of_sync"]:
            assert f["token"] != "-"
