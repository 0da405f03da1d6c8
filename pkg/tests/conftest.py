import warnings

import numpy as np
import pytest

from popmajority import engine
from popmajority.protocols import make_protocol


def instance(n, gap=None):
    """Smallest-gap instance (majority A) unless ``gap`` is given."""
    g = gap if gap is not None else (1 if n % 2 else 2)
    return engine.InputInstance(n, (n + g) // 2, (n - g) // 2)


@pytest.fixture(autouse=True)
def _quiet_params():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="c=.* exceeds C/9")
        yield


def reachable_states(protocol, n_runs=3, seed=11, gap=None, limit=None):
    """Packed states seen along a few traced runs (all of them unless ``limit``)."""
    inst = instance(protocol.n, gap)
    seen = set()
    for r in range(n_runs):
        _, _, tr = engine.run(protocol, inst, seed=seed, stream=r, trace=True, trace_limit=limit or 2_000_000)
        seen.update(int(x) for x in tr.before.ravel())
        seen.update(int(x) for x in tr.after.ravel())
    return sorted(seen)


# pass/fail lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def get_protocol(name, n, **kw):
    return make_protocol(name, n, **kw)


__all__ = ["instance", "reachable_states", "get_protocol", "np"]
