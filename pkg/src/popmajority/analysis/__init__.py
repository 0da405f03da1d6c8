"""Invariant monitors, exact oracles, the critical-phase calculator and the state auditor."""

from popmajority.analysis.audit import (
    AuditReport,
    AuditRow,
    fast_components,
    fit_growth,
    observed_states,
    state_audit,
)
from popmajority.analysis.critical import CriticalPhase, critical_phase
from popmajority.analysis.invariants import (
    EpochStartMonitor,
    InvariantReport,
    check_concentration,
    check_epoch_invariant,
    check_phase_invariant1,
    interaction_counts,
    window_counts,
)
from popmajority.analysis.oracles import (
    BroadcastStats,
    MarkovOracleResult,
    broadcast_expected,
    broadcast_expected_by_stages,
    broadcast_stats,
    four_state_markov_oracle,
    simulate_broadcast,
)

__all__ = [
    "AuditReport",
    "AuditRow",
    "BroadcastStats",
    "CriticalPhase",
    "EpochStartMonitor",
    "InvariantReport",
    "MarkovOracleResult",
    "broadcast_expected",
    "broadcast_expected_by_stages",
    "broadcast_stats",
    "check_concentration",
    "check_epoch_invariant",
    "check_phase_invariant1",
    "critical_phase",
    "fast_components",
    "fit_growth",
    "four_state_markov_oracle",
    "interaction_counts",
    "observed_states",
    "simulate_broadcast",
    "state_audit",
    "window_counts",
]
