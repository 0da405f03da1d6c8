import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import instance
from popmajority import engine
from popmajority.protocols import make_protocol
from popmajority.protocols.base import FAIL, FS_B, FS_a, output_of
from popmajority.protocols.majority import pack

FAST = ["majority", "fastmajority1", "fastmajority2"]


def test_product_no_op():
    p = make_protocol("majority", 64)
    # two weak backups and two failed fast parts: neither component changes
    s = (pack(0, FAIL, 0, 0, 0) << 2) | FS_a
    assert p.transition(s, s) == (s, s)


def test_fail_node_outputs_backup():
    p = make_protocol("majority", 64)
    assert output_of(p, (pack(0, FAIL, 0, 0, 0) << 2) | FS_B) == "B"
    assert output_of(p, (pack(0, FAIL, 0, 0, 0) << 2) | FS_a) == "A"


def test_done_outputs_its_opinion():
    p = make_protocol("majority", 64)
    done_b = pack(2, 2, 0, 3, 0)
    assert output_of(p, (done_b << 2) | FS_a) == "B"


def test_empty_worker_outputs_backup():
    from popmajority.protocols.fastmajority2 import pack_worker
    p = make_protocol("fastmajority2", 64)
    empty = pack_worker(token=0)
    assert output_of(p, (empty << 2) | 3) == "B"
    assert output_of(p, (empty << 2) | 2) == "A"


@pytest.mark.parametrize("name", FAST)
def test_backup_trajectory_equals_standalone(name):
    n = 40
    inst = instance(n)
    ext = make_protocol(name, n)
    fs = make_protocol("fourstate", n)
    budget = 30_000
    c1, _, t1 = engine.run(ext, inst, seed=6, max_interactions=budget, trace=True, fast_backup=False)
    c2, _, t2 = engine.run(fs, inst, seed=6, max_interactions=len(t1), trace=True, fast_backup=False)
    k = min(len(t1), len(t2))
    assert np.array_equal(t1.after[:k] & 3, t2.after[:k])
    if len(t1) == len(t2):
        assert np.array_equal(c1.states & 3, c2.states)


@settings(max_examples=12, deadline=None)
@given(name=st.sampled_from(FAST), seed=st.integers(0, 2**40), n=st.sampled_from([16, 33, 64]))
def test_extended_never_stabilizes_wrong(name, seed, n):
    _, m, _ = engine.run(make_protocol(name, n), instance(n), seed=seed)
    assert m.outcome in (engine.CORRECT_DONE, engine.ALL_FAIL_BACKUP)
