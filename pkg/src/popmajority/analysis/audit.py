"""Distinct-state audit: how many states a protocol actually visits as n grows.

A run is first executed by the engine to find where it stops; the same
scheduler stream is then replayed through the bare transition function while
every post-interaction state is collected. The replay must land on the
engine's final configuration, which doubles as a check that the engine
draws exactly one pair per interaction.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numba as nb
import numpy as np

from popmajority import engine
from popmajority import rng as _rng
from popmajority.protocols import make_protocol
from popmajority.protocols.base import ProtocolDefinition

_REPLAY_CACHE: Dict[object, object] = {}


def _replay_kernel(delta):
    if delta in _REPLAY_CACHE:
        return _REPLAY_CACHE[delta]

    @nb.njit
    def replay(states, rs, pv, t, seen):
        n = len(states)
        for k in range(n):
            seen[states[k]] = True
        for _ in range(t):
            i, j = _rng.ordered_pair(rs, n)
            a, b = delta(states[i], states[j], pv)
            states[i] = a
            states[j] = b
            seen[a] = True
            seen[b] = True

    _REPLAY_CACHE[delta] = replay
    return replay


def observed_states(protocol: ProtocolDefinition, instance: engine.InputInstance, seed: int = 0,
                    stream: int = 0, max_interactions: Optional[int] = None):
    """Set of packed states seen in one run, with the run's metrics.

    The backup fast-forward is disabled so that every interaction is a plain
    transition and the replay covers the whole run.
    """
    config, metrics, _ = engine.run(protocol, instance, seed=seed, stream=stream,
                                    max_interactions=max_interactions, fast_backup=False)
    states = np.ascontiguousarray(protocol.initial(instance), dtype=np.int64).copy()
    seen = nb.typed.Dict.empty(key_type=nb.types.int64, value_type=nb.types.boolean)
    _replay_kernel(protocol.delta)(states, _rng.make_state(seed, stream), protocol.pv_tuple,
                                   metrics.interactions, seen)
    if not np.array_equal(states, config.states):
        raise RuntimeError("replay diverged from the engine run")
    return set(seen.keys()), metrics


def fast_components(protocol: ProtocolDefinition, seen: Iterable[int]) -> set:
    """Project extended states onto their fast component (the backup bits dropped).

    The four-state backup multiplies every fast state by at most four and
    does not depend on ``n``, so growth is judged on the fast part.
    """
    if not protocol.extended:
        return set(seen)
    return {int(s) >> 2 for s in seen}


@dataclass
class AuditRow:
    """``states_seen`` counts fast components; ``full_states_seen`` whole packed states."""

    protocol: str
    n: int
    lam: int
    runs: int
    states_seen: int
    per_run: List[int] = field(default_factory=list)
    full_states_seen: Optional[int] = None


@dataclass
class AuditReport:
    """Per-``n`` distinct-state counts and their growth against ``lam`` and ``lam^2``."""

    protocol: str
    rows: List[AuditRow]
    ratios: List[float]
    lam_ratios: List[float]
    lam2_ratios: List[float]
    exponent: Optional[float]
    fit_lam: Optional[float]
    fit_lam2: Optional[float]

    def to_record(self) -> dict:
        return {
            "protocol": self.protocol,
            "n": [r.n for r in self.rows],
            "lam": [r.lam for r in self.rows],
            "states_seen": [r.states_seen for r in self.rows],
            "full_states_seen": [r.full_states_seen for r in self.rows],
            "ratios": self.ratios,
            "lam_ratios": self.lam_ratios,
            "lam2_ratios": self.lam2_ratios,
            "exponent": self.exponent,
            "count_per_lam": self.fit_lam,
            "count_per_lam2": self.fit_lam2,
        }


def _lam(n: int) -> int:
    return max(1, math.ceil(math.log2(n)))


def _through_origin(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of ``y = k x``."""
    return float(np.dot(x, y) / np.dot(x, x))


def fit_growth(rows: Sequence[AuditRow], protocol: str) -> AuditReport:
    """Consecutive-ladder ratios plus a log-log exponent of count against ``lam``."""
    rows = sorted(rows, key=lambda r: r.n)
    counts = np.array([r.states_seen for r in rows], dtype=float)
    lams = np.array([r.lam for r in rows], dtype=float)
    ratios = [float(counts[k + 1] / counts[k]) for k in range(len(rows) - 1)]
    lam_ratios = [float(lams[k + 1] / lams[k]) for k in range(len(rows) - 1)]
    exponent = None
    if len(rows) >= 2 and len(set(lams.tolist())) >= 2:
        exponent = float(np.polyfit(np.log(lams), np.log(counts), 1)[0])
    return AuditReport(
        protocol=protocol,
        rows=list(rows),
        ratios=ratios,
        lam_ratios=lam_ratios,
        lam2_ratios=[r * r for r in lam_ratios],
        exponent=exponent,
        fit_lam=_through_origin(lams, counts) if len(rows) else None,
        fit_lam2=_through_origin(lams ** 2, counts) if len(rows) else None,
    )


def state_audit(protocol_name: str, ns: Iterable[int], runs: int = 1, seed: int = 0,
                gap: Optional[int] = None, extended: bool = True, **params) -> AuditReport:
    """Count distinct canonical states over ``runs`` seeded runs at each ``n``.

    Packed states map one-to-one onto canonical encodings, so distinct packed
    values are counted directly. For extended protocols the fitted count is
    the number of distinct fast components and the full count is reported
    next to it. The instance has the smallest gap of ``n``'s parity unless
    ``gap`` is given.
    """
    rows = []
    for n in ns:
        protocol = make_protocol(protocol_name, n, extended=extended, **params)
        g = gap if gap is not None else (1 if n % 2 else 2)
        instance = engine.InputInstance(n, (n + g) // 2, (n - g) // 2)
        union: set = set()
        per_run = []
        for r in range(runs):
            seen, _ = observed_states(protocol, instance, seed=seed, stream=r)
            per_run.append(len(fast_components(protocol, seen)))
            union |= seen
        fast = fast_components(protocol, union)
        rows.append(AuditRow(protocol_name, n, _lam(n), runs, len(fast), per_run, len(union)))
    return fit_growth(rows, protocol_name)
