"""Empirical monitors for the epoch/phase invariants and scheduler concentration.

The checks read a configuration snapshot and never touch the simulation.
Proof-scale thresholds are evaluated with the protocol's integer geometry:
``log^a n`` becomes ``P``, ``log^{1-a} n`` becomes ``ceil(lam / P)``, ``log n``
becomes ``lam``, and "the last quarter of the epoch" is ``epoch_step >= 3E/4``.
"""

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional

import numba as nb
import numpy as np

from popmajority import rng as _rng
from popmajority.engine import Configuration, Monitor
from popmajority.protocols.base import NORMAL, ProtocolDefinition
from popmajority.protocols.fastmajority1 import (
    F_ADD,
    F_OOS,
    SH_AGE,
    SH_EPOCH,
    SH_STEP,
    FM1Params,
)

# cap on per-node violation entries kept in a report
MAX_LISTED = 20


def _jsonable(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class InvariantReport:
    """Outcome of one invariant check on one snapshot."""

    name: str
    t: int
    passed: bool
    measured: Dict[str, Any] = field(default_factory=dict)
    thresholds: Dict[str, Any] = field(default_factory=dict)
    violations: List[Dict[str, Any]] = field(default_factory=list)
    note: Optional[str] = None

    def to_record(self) -> Dict[str, Any]:
        rec = {
            "invariant": self.name,
            "t": self.t,
            "passed": self.passed,
            "measured": _jsonable(self.measured),
            "thresholds": _jsonable(self.thresholds),
            "violations": _jsonable(self.violations),
        }
        if self.note is not None:
            rec["note"] = self.note
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


@dataclass
class _FM1View:
    tok: np.ndarray
    status: np.ndarray
    oos: np.ndarray
    add: np.ndarray
    epoch: np.ndarray
    age: np.ndarray
    step: np.ndarray


def _fm1_params(protocol: ProtocolDefinition) -> Optional[FM1Params]:
    params = protocol.params
    return params if isinstance(params, FM1Params) else None


def _fm1_view(config: Configuration, protocol: ProtocolDefinition) -> _FM1View:
    s = np.asarray(config.states, dtype=np.int64)
    if protocol.extended:
        s = s >> 2
    return _FM1View(
        tok=s & 3,
        status=(s >> 2) & 3,
        oos=(s & F_OOS) != 0,
        add=(s & F_ADD) != 0,
        epoch=(s >> SH_EPOCH) & 63,
        age=(s >> SH_AGE) & 15,
        step=s >> SH_STEP,
    )


def _unsupported(name: str, config: Configuration, protocol: ProtocolDefinition) -> InvariantReport:
    return InvariantReport(
        name=name, t=config.interaction_count, passed=False,
        note=f"{name} is defined on FastMajority1 configurations, not {protocol.name}",
    )


def _listed(idx: np.ndarray, reason: str, view: _FM1View) -> List[Dict[str, Any]]:
    return [
        {"node": int(k), "reason": reason, "epoch": int(view.epoch[k]), "step": int(view.step[k]),
         "status": int(view.status[k]), "out_of_sync": bool(view.oos[k])}
        for k in idx[:MAX_LISTED]
    ]


def check_epoch_invariant(config: Configuration, j: int, protocol: ProtocolDefinition) -> InvariantReport:
    """Check the regular start-of-epoch-``j`` configuration.

    Clause 1 asks for at least ``n (1 - 2^{-3P})`` normal nodes in epoch ``j``
    with ``epoch_step <= c P``. Every other node must be either (2a) normal in
    epoch ``j - 1`` in the last quarter of that epoch, or (2b) normal or
    out-of-sync in epoch ``j`` with ``epoch_step <= 4 c lam``.
    """
    name = "EpochInvariant"
    params = _fm1_params(protocol)
    if params is None:
        return _unsupported(name, config, protocol)
    v = _fm1_view(config, protocol)
    n = config.n
    P, lam, c, E = params.P, params.lam, params.c, params.epoch_len
    running = (v.status == NORMAL) & ~v.add
    normal = running & ~v.oos
    core = normal & (v.epoch == j) & (v.step <= c * P)
    need = Fraction(n) * (1 - Fraction(1, 2 ** (3 * P)))
    rest = ~core
    fast = normal & (v.epoch == j - 1) & (4 * v.step >= 3 * E)
    slow = running & (v.epoch == j) & (v.step <= 4 * c * lam)
    bad = np.flatnonzero(rest & ~fast & ~slow)
    n_core = int(core.sum())
    clause1 = n_core >= need
    clause2 = len(bad) == 0
    core_steps = v.step[core]
    return InvariantReport(
        name=name,
        t=config.interaction_count,
        passed=bool(clause1 and clause2),
        measured={
            "epoch": j,
            "n": n,
            "clause1": bool(clause1),
            "clause2": bool(clause2),
            "normal_in_epoch": n_core,
            "clause1_margin": str(n_core - need),
            "fast_remaining": int((rest & fast).sum()),
            "slow_remaining": int((rest & slow & ~fast).sum()),
            "violating": int(len(bad)),
            "max_core_step": int(core_steps.max()) if n_core else None,
        },
        thresholds={
            "min_normal_in_epoch": need,
            "core_step_max": c * P,
            "fast_step_min": Fraction(3 * E, 4),
            "slow_step_max": 4 * c * lam,
        },
        violations=_listed(bad, "neither last quarter of previous epoch nor early in this epoch", v),
    )


def _relative_value(abs_age: np.ndarray, ref: int) -> Fraction:
    """Sum of ``2^(ref - age)`` over ages, exactly."""
    total = Fraction(0)
    ages, counts = np.unique(abs_age, return_counts=True)
    for g, k in zip(ages.tolist(), counts.tolist()):
        total += k * Fraction(2) ** (ref - g)
    return total


def check_phase_invariant1(config: Configuration, j: int, i: int, protocol: ProtocolDefinition) -> InvariantReport:
    """Check the regular start-of-phase-``i`` configuration inside epoch ``j``.

    ``W`` holds the normal nodes of epoch ``j`` in the beginning part of phase
    ``i`` (for ``i = P``, the beginning of the epoch's second part); it must
    have at least ``n (1 - (i+1)/2^{2P})`` members. Nodes of ``U = V \\ W``
    must sit late in epoch ``j - 1`` (only while ``i < (c/C) P``) or within
    ``4 c lam`` steps of phase ``i``'s start, and their tokens may carry a total
    value of at most ``n (i+1)/2^{2P}`` relative to the end of epoch ``j``.
    """
    name = "PhaseInvariant1"
    params = _fm1_params(protocol)
    if params is None:
        return _unsupported(name, config, protocol)
    P = params.P
    if not 0 <= i <= P:
        raise ValueError(f"phase index must lie in [0, {P}], got {i}")
    v = _fm1_view(config, protocol)
    n = config.n
    lam, c, C, E, L = params.lam, params.c, params.C, params.epoch_len, params.phase_len
    head = c * math.ceil(lam / P)
    running = (v.status == NORMAL) & ~v.add
    normal = running & ~v.oos
    start = i * L if i < P else params.first_part_len
    in_phase = (v.step >= start) & (v.step - start <= head)
    if i < P:
        in_phase &= v.step < (i + 1) * L
    W = normal & (v.epoch == j) & in_phase
    U = ~W
    need = Fraction(n) * (1 - Fraction(i + 1, 2 ** (2 * P)))
    late_prev = normal & (v.epoch == j - 1) & (4 * v.step >= 3 * E) & (i * C < c * P)
    near = running & (v.epoch == j) & (np.abs(v.step - start) <= 4 * c * lam)
    bad = np.flatnonzero(U & ~late_prev & ~near)
    u_tok = U & (v.tok != 0)
    # absolute age: epoch * P + within-epoch age; the end of epoch j has age (j+1) P
    abs_age = v.epoch[u_tok] * P + v.age[u_tok]
    stray = _relative_value(abs_age, (j + 1) * P)
    bound = Fraction(n * (i + 1), 2 ** (2 * P))
    n_w = int(W.sum())
    c1 = n_w >= need
    c2a = len(bad) == 0
    c2b = stray <= bound
    return InvariantReport(
        name=name,
        t=config.interaction_count,
        passed=bool(c1 and c2a and c2b),
        measured={
            "epoch": j,
            "phase": i,
            "n": n,
            "clause1": bool(c1),
            "clause2a": bool(c2a),
            "clause2b": bool(c2b),
            "W": n_w,
            "U": n - n_w,
            "U_tokens": int(u_tok.sum()),
            "stray_value": stray,
            "stray_per_node": stray / n,
            "violating": int(len(bad)),
        },
        thresholds={
            "min_W": need,
            "phase_head_steps": head,
            "near_steps": 4 * c * lam,
            "max_stray_value": bound,
        },
        violations=_listed(bad, "outside W and not near phase start", v),
    )


# ------------------------------------------------------------ concentration

@nb.njit(cache=True)
def _count_window(rs, n, skip, t):
    counts = np.zeros(n, np.int64)
    for _ in range(skip):
        _rng.ordered_pair(rs, n)
    for _ in range(t):
        i, j = _rng.ordered_pair(rs, n)
        counts[i] += 1
        counts[j] += 1
    return counts


def interaction_counts(n: int, seed: int, stream: int = 0, start: int = 0, t: int = 0) -> np.ndarray:
    """Per-node interaction counts over ``[start, start + t)`` of a run's scheduler stream.

    The engine draws exactly one ordered pair per interaction, so replaying
    the stream reproduces the pairs a run with the same ``(seed, stream)``
    used, independently of the protocol.
    """
    if n < 2 or start < 0 or t < 0:
        raise ValueError("need n >= 2 and a non-negative window")
    rs = _rng.make_state(seed, stream)
    return _count_window(rs, n, start, t)


def window_counts(pairs) -> np.ndarray:
    """Per-node counts from an explicit sequence of ``(i, j)`` pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = int(pairs.max()) + 1 if len(pairs) else 0
    return np.bincount(pairs.ravel(), minlength=n)


def check_concentration(counts, t: int, n: int, c: float, lam: int) -> InvariantReport:
    """Max over nodes of ``|count - 2t/n|`` against ``c * lam``.

    ``counts`` has one entry per node (shorter arrays are zero-padded, so a
    node that never interacted is still seen).
    """
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) > n:
        raise ValueError("more counts than nodes")
    if len(counts) < n:
        counts = np.concatenate([counts, np.zeros(n - len(counts), np.int64)])
    if int(counts.sum()) != 2 * t:
        raise ValueError(f"counts sum to {int(counts.sum())}, expected 2t = {2 * t}")
    mean = Fraction(2 * t, n)
    # the extreme deviation is attained at the min or max count
    lo, hi = int(counts.min()), int(counts.max())
    dev = max(abs(lo - mean), abs(hi - mean))
    worst = int(np.argmax(counts)) if abs(hi - mean) >= abs(lo - mean) else int(np.argmin(counts))
    bound = c * lam
    return InvariantReport(
        name="Concentration",
        t=t,
        passed=bool(dev <= bound),
        measured={"n": n, "window": t, "expected_count": mean, "max_deviation": dev,
                  "worst_node": worst, "min_count": lo, "max_count": hi},
        thresholds={"max_deviation": bound},
    )


# ------------------------------------------------------------ run monitors

class EpochStartMonitor(Monitor):
    """Checks the epoch invariant each time a new epoch fills up.

    The engine pauses the first time ``ceil(n (1 - 2^{-3P}))`` nodes report
    epoch ``j``, the earliest instant at which clause 1 can hold; the check
    runs on that snapshot and the watch moves on to ``j + 1``.
    """

    def __init__(self, protocol: ProtocolDefinition, first_epoch: int = 1):
        params = _fm1_params(protocol)
        if params is None:
            raise ValueError("epoch monitoring needs a FastMajority1 protocol")
        self.protocol = protocol
        self.epoch = first_epoch
        self.last_epoch = params.E_max - 1
        need = Fraction(protocol.n) * (1 - Fraction(1, 2 ** (3 * params.P)))
        self.threshold = math.ceil(need)
        self.reports: List[InvariantReport] = []

    def epoch_watch(self):
        if self.epoch > self.last_epoch:
            return None
        return self.epoch, self.threshold

    def observe(self, config: Configuration, reason: str) -> None:
        if reason != "watch":
            return
        self.reports.append(check_epoch_invariant(config, self.epoch, self.protocol))
        self.epoch += 1
