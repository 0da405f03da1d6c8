"""Population, uniform random pairwise scheduler and the interaction loop.

A run is strictly sequential. The hot loop is compiled with numba and keeps
per-node caches of each state's classification so that class counters,
output correctness, epoch census and token-value conservation are maintained
incrementally at O(1) cost per interaction.
"""

from dataclasses import dataclass, field
from fractions import Fraction
import math
from collections import Counter
from typing import Any, Dict, List, Optional, Tuple

import numba as nb
import numpy as np

from popmajority import rng as _rng
from popmajority.protocols.base import (
    AUX_ADD,
    AUX_DONE,
    AUX_FAIL,
    AUX_NEUTRAL,
    AUX_OOS,
    ProtocolDefinition,
    four_state_delta,
)

# meta vector layout shared between the driver and the kernels
M_T = 0
M_WRONG = 1
M_LAST_WRONG = 2
M_STABLE_AT = 3
M_FIRST_FAIL = 4
M_FIRST_DONE = 5
M_FIRST_ADD = 6
M_ADD_STATE = 7
M_CONS_ACTIVE = 8
M_CONS_VIOL = 9
M_CONS_FIRST = 10
M_OOS = 11
M_OOS_MAX = 12
M_FAILS = 13
M_ADDS = 14
M_RESTORE = 15
M_EXPECTED = 16
M_WATCH_EPOCH = 17
M_WATCH_THR = 18
M_STOP = 19
M_TRACE_CAP = 20
M_TRACE_LEN = 21
M_PAUSE_AT = 22
M_MAX_T = 23
M_MAJ = 24
M_DONES = 25
M_OOS_MAX_AT = 26
M_BACKUP_STOP = 27
M_CMASK = 28
M_NEUTRAL = 29
M_SIZE = 32

STOP_NONE, STOP_STABLE, STOP_MAX, STOP_WATCH, STOP_BACKUP, STOP_PAUSE = range(6)

CORRECT_DONE = "correct-done"
ALL_FAIL_BACKUP = "all-fail->backup"
CORRECT_STABLE = "correct-stable"
INCORRECT = "incorrect"
TIMEOUT = "timeout"


class InvalidInstance(ValueError):
    pass


@dataclass(frozen=True)
class InputInstance:
    n: int
    a0: int
    b0: int

    def __post_init__(self):
        if self.n < 2:
            raise InvalidInstance(f"n must be at least 2, got {self.n}")
        if self.a0 < 0 or self.b0 < 0 or self.a0 + self.b0 != self.n:
            raise InvalidInstance(f"need a0 + b0 = n with non-negative counts, got {self.a0}+{self.b0} != {self.n}")
        if self.a0 == self.b0:
            raise InvalidInstance("exact majority needs a0 != b0")

    @classmethod
    def from_a0(cls, n: int, a0: int) -> "InputInstance":
        return cls(n, a0, n - a0)

    @property
    def majority(self) -> int:
        return 0 if self.a0 > self.b0 else 1

    @property
    def imbalance(self) -> Fraction:
        return Fraction(abs(self.a0 - self.b0), self.n)


@dataclass
class Configuration:
    states: np.ndarray
    interaction_count: int = 0

    @property
    def n(self) -> int:
        return len(self.states)


@dataclass
class RunMetrics:
    n: int
    a0: int
    b0: int
    seed: int
    stream: int
    outcome: str
    interactions: int
    stabilization_interactions: Optional[int]
    convergence_interactions: Optional[int]
    first_done: Optional[int] = None
    first_fail: Optional[int] = None
    additional_epoch_at: Optional[int] = None
    final_epoch: Optional[int] = None
    oos_max: int = 0
    conservation_violations: int = 0
    first_violation: Optional[int] = None
    restore_check: Optional[bool] = None
    backup_fast_forward: bool = False
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def parallel_time_TS(self) -> Optional[Fraction]:
        if self.stabilization_interactions is None:
            return None
        return Fraction(self.stabilization_interactions, self.n)

    @property
    def parallel_time_TC(self) -> Optional[Fraction]:
        if self.convergence_interactions is None:
            return None
        return Fraction(self.convergence_interactions, self.n)

    @property
    def correct(self) -> bool:
        return self.outcome in (CORRECT_DONE, ALL_FAIL_BACKUP, CORRECT_STABLE)

    def to_record(self) -> Dict[str, Any]:
        ts, tc = self.parallel_time_TS, self.parallel_time_TC
        rec = {
            "n": self.n,
            "a0": self.a0,
            "b0": self.b0,
            "seed": self.seed,
            "stream": self.stream,
            "outcome": self.outcome,
            "interactions": self.interactions,
            "stabilization_interactions": self.stabilization_interactions,
            "convergence_interactions": self.convergence_interactions,
            "parallel_time_TS": None if ts is None else str(ts),
            "parallel_time_TC": None if tc is None else str(tc),
            "first_done": self.first_done,
            "first_fail": self.first_fail,
            "additional_epoch_at": self.additional_epoch_at,
            "final_epoch": self.final_epoch,
            "oos_max": self.oos_max,
            "conservation_violations": self.conservation_violations,
            "restore_check": self.restore_check,
            "backup_fast_forward": self.backup_fast_forward,
        }
        rec.update(self.extra)
        return rec


@dataclass
class EventTrace:
    """One record per applied interaction (possibly truncated at a cap)."""

    t: np.ndarray
    i: np.ndarray
    j: np.ndarray
    before: np.ndarray
    after: np.ndarray
    truncated: bool = False

    def __len__(self):
        return len(self.t)

    def lines(self, protocol: ProtocolDefinition):
        enc = protocol.encode
        for k in range(len(self.t)):
            yield (
                f"{self.t[k]},{self.i[k]},{self.j[k]},"
                f"{enc(self.before[k, 0])},{enc(self.before[k, 1])},"
                f"{enc(self.after[k, 0])},{enc(self.after[k, 1])}"
            )

    def write(self, path, protocol: ProtocolDefinition):
        with open(path, "w") as fh:
            for line in self.lines(protocol):
                fh.write(line + "\n")


def default_max_interactions(n: int, protocol: Optional[ProtocolDefinition] = None) -> int:
    """``64 n ceil(log2 n)^2``, raised to twice the protocol's horizon when that is longer."""
    lam = max(1, math.ceil(math.log2(n)))
    budget = 64 * n * lam * lam
    if protocol is not None and protocol.horizon is not None:
        budget = max(budget, int(math.ceil(2 * protocol.horizon * n)))
    return budget


def is_stable(protocol: ProtocolDefinition, states) -> bool:
    """The protocol's stability predicate evaluated on a whole configuration."""
    pvt = protocol.pv_tuple
    counts = np.zeros(protocol.n_classes, np.int64)
    for s in np.asarray(states, dtype=np.int64):
        counts[protocol.classify(s, pvt)[0]] += 1
    return bool(protocol.stable(counts, len(states)))


def schedule_pair(rng_state: np.ndarray, n: int) -> Tuple[int, int]:
    """Draw an ordered (initiator, responder) pair; advances ``rng_state``."""
    if n < 2:
        raise ValueError("need n >= 2")
    i, j = _rng.draw_pairs(rng_state, n, 1)[0]
    return int(i), int(j)


# ------------------------------------------------------------------ kernels

_KERNELS: Dict[Any, Any] = {}


def _kernels(protocol: ProtocolDefinition):
    key = (protocol.delta, protocol.classify, protocol.stable, protocol.backup_only)
    if key not in _KERNELS:
        _KERNELS[key] = _build_kernels(*key)
    return _KERNELS[key]


def _build_kernels(delta, classify, stable, backup_only):
    @nb.njit
    def prepare(states, kl, out, ep, val, aux, counts, ecount, pv, meta):
        n = states.shape[0]
        counts[:] = 0
        ecount[:] = 0
        wrong = 0
        oos = 0
        fails = 0
        adds = 0
        dones = 0
        neutral = 0
        maj = meta[M_MAJ]
        for v in range(n):
            k, o, e, x, a = classify(states[v], pv)
            kl[v] = k
            out[v] = o
            ep[v] = e
            val[v] = x
            aux[v] = a
            counts[k] += 1
            if e >= 0 and e < ecount.shape[0]:
                ecount[e] += 1
            if o != maj:
                wrong += 1
            if a & AUX_OOS:
                oos += 1
            if a & AUX_FAIL:
                fails += 1
            if a & AUX_ADD:
                adds += 1
            if a & AUX_DONE:
                dones += 1
            if a & AUX_NEUTRAL:
                neutral += 1
        meta[M_WRONG] = wrong
        meta[M_OOS] = oos
        meta[M_FAILS] = fails
        meta[M_ADDS] = adds
        meta[M_DONES] = dones
        meta[M_NEUTRAL] = neutral
        return stable(counts, n)

    @nb.njit
    def kernel(states, kl, out, ep, val, aux, counts, ecount, rs, pv, meta,
               tr_t, tr_ij, tr_before, tr_after):
        n = states.shape[0]
        n_ep = ecount.shape[0]
        maj = meta[M_MAJ]
        t = meta[M_T]
        max_t = meta[M_MAX_T]
        pause_at = meta[M_PAUSE_AT]
        watch_e = meta[M_WATCH_EPOCH]
        watch_thr = meta[M_WATCH_THR]
        cap = meta[M_TRACE_CAP]
        tlen = meta[M_TRACE_LEN]
        cmask = meta[M_CMASK]
        meta[M_STOP] = STOP_NONE
        while True:
            if t >= max_t:
                meta[M_STOP] = STOP_MAX
                break
            if pause_at >= 0 and t >= pause_at:
                meta[M_STOP] = STOP_PAUSE
                break
            i, j = _rng.ordered_pair(rs, n)
            si = states[i]
            sj = states[j]
            ni, nj = delta(si, sj, pv)
            t += 1
            if tlen < cap:
                tr_t[tlen] = t - 1
                tr_ij[tlen, 0] = i
                tr_ij[tlen, 1] = j
                tr_before[tlen, 0] = si
                tr_before[tlen, 1] = sj
                tr_after[tlen, 0] = ni
                tr_after[tlen, 1] = nj
                tlen += 1
            states[i] = ni
            states[j] = nj
            # only bits in the protocol's mask can change a node's classification
            if ((ni ^ si) | (nj ^ sj)) & cmask != 0:
                vi = val[i]
                vj = val[j]
                # refresh the cached classification of both nodes (written
                # inline: a helper taking these arrays costs refcount traffic)
                for side in range(2):
                    if side == 0:
                        if (ni ^ si) & cmask == 0:
                            continue
                        v = i
                        s = ni
                    else:
                        if (nj ^ sj) & cmask == 0:
                            continue
                        v = j
                        s = nj
                    k, o, e, x, a = classify(s, pv)
                    counts[kl[v]] -= 1
                    counts[k] += 1
                    kl[v] = k
                    if out[v] != o:
                        if o == maj:
                            meta[M_WRONG] -= 1
                        elif out[v] == maj:
                            meta[M_WRONG] += 1
                        out[v] = o
                    if ep[v] != e:
                        if ep[v] >= 0 and ep[v] < n_ep:
                            ecount[ep[v]] -= 1
                        if e >= 0 and e < n_ep:
                            ecount[e] += 1
                        ep[v] = e
                    val[v] = x
                    old = aux[v]
                    if old != a:
                        if (a & AUX_OOS) != (old & AUX_OOS):
                            meta[M_OOS] += 1 if a & AUX_OOS else -1
                            if meta[M_OOS] > meta[M_OOS_MAX]:
                                meta[M_OOS_MAX] = meta[M_OOS]
                                meta[M_OOS_MAX_AT] = t
                        if (a & AUX_FAIL) != (old & AUX_FAIL):
                            meta[M_FAILS] += 1 if a & AUX_FAIL else -1
                            if meta[M_FIRST_FAIL] < 0:
                                meta[M_FIRST_FAIL] = t
                        if (a & AUX_DONE) != (old & AUX_DONE):
                            meta[M_DONES] += 1 if a & AUX_DONE else -1
                            if meta[M_FIRST_DONE] < 0:
                                meta[M_FIRST_DONE] = t
                        if (a & AUX_ADD) != (old & AUX_ADD):
                            meta[M_ADDS] += 1 if a & AUX_ADD else -1
                            if meta[M_FIRST_ADD] < 0:
                                meta[M_FIRST_ADD] = t
                                meta[M_ADD_STATE] = s
                        if (a & AUX_NEUTRAL) != (old & AUX_NEUTRAL):
                            meta[M_NEUTRAL] += 1 if a & AUX_NEUTRAL else -1
                        aux[v] = a
                if meta[M_CONS_ACTIVE] == 1:
                    if meta[M_FAILS] > 0 or (meta[M_ADDS] > 0 and meta[M_RESTORE] != 1):
                        meta[M_CONS_ACTIVE] = 0
                    elif val[i] + val[j] != vi + vj:
                        meta[M_CONS_VIOL] += 1
                        if meta[M_CONS_FIRST] < 0:
                            meta[M_CONS_FIRST] = t
                if meta[M_RESTORE] == 0 and meta[M_ADDS] + meta[M_NEUTRAL] == n and meta[M_ADDS] > 0:
                    if meta[M_FAILS] > 0:
                        meta[M_RESTORE] = 3
                    else:
                        total = 0
                        for v in range(n):
                            total += val[v]
                        if total == meta[M_EXPECTED]:
                            # a consistent restore: keep checking conservation
                            meta[M_RESTORE] = 1
                            meta[M_CONS_ACTIVE] = 1
                        else:
                            meta[M_RESTORE] = 2
                if meta[M_WRONG] > 0:
                    meta[M_LAST_WRONG] = t
                if stable(counts, n):
                    meta[M_STOP] = STOP_STABLE
                    meta[M_STABLE_AT] = t
                    break
                if meta[M_BACKUP_STOP] == 1 and meta[M_FAILS] == n and backup_only(counts, n):
                    meta[M_STOP] = STOP_BACKUP
                    break
                if watch_e >= 0 and ecount[watch_e] >= watch_thr:
                    meta[M_STOP] = STOP_WATCH
                    break
            elif meta[M_WRONG] > 0:
                meta[M_LAST_WRONG] = t
        meta[M_T] = t
        meta[M_TRACE_LEN] = tlen

    @nb.njit
    def simulate(states, rs, pv, meta, n_classes, n_epochs, tail_from_start):
        n = states.shape[0]
        kl = np.empty(n, np.int64)
        out = np.empty(n, np.int64)
        ep = np.empty(n, np.int64)
        val = np.empty(n, np.int64)
        aux = np.empty(n, np.int64)
        counts = np.zeros(n_classes, np.int64)
        ecount = np.zeros(max(1, n_epochs), np.int64)
        empty1 = np.empty(0, np.int64)
        empty2 = np.empty((0, 2), np.int64)
        is_stable = prepare(states, kl, out, ep, val, aux, counts, ecount, pv, meta)
        if meta[M_WRONG] > 0:
            meta[M_LAST_WRONG] = 0
        meta[M_OOS_MAX] = meta[M_OOS]
        if np.sum(val) != meta[M_EXPECTED]:
            meta[M_CONS_VIOL] += 1
            meta[M_CONS_FIRST] = 0
        if is_stable:
            meta[M_STABLE_AT] = 0
            meta[M_STOP] = STOP_STABLE
            return False
        if not tail_from_start:
            kernel(states, kl, out, ep, val, aux, counts, ecount, rs, pv, meta,
                   empty1, empty2, empty2, empty2)
            if meta[M_STOP] != STOP_BACKUP:
                return False
        meta[M_CONS_ACTIVE] = 0
        backup_tail(states, rs, meta)
        prepare(states, kl, out, ep, val, aux, counts, ecount, pv, meta)
        return True

    @nb.njit
    def batch(init, rs_all, pv, meta0, n_classes, n_epochs, tail_from_start, results, used_tail):
        for r in range(rs_all.shape[0]):
            states = init.copy()
            rs = rs_all[r].copy()
            meta = meta0.copy()
            used_tail[r] = simulate(states, rs, pv, meta, n_classes, n_epochs, tail_from_start)
            results[r, :] = meta

    return prepare, kernel, simulate, batch


@nb.njit
def backup_tail(states, rs, meta):
    """Run only the four-state component (bits 0-1) with exact null skipping.

    Valid when no other part of any state can change and every output equals
    the backup output. Effective pairs are (A,B), (A,b) and (B,a); the number
    of null interactions before the next effective one is geometric.
    """
    n = states.shape[0]
    maj = meta[M_MAJ]
    t = meta[M_T]
    max_t = meta[M_MAX_T]
    # index sets per backup class
    members = np.empty((4, n), dtype=np.int64)
    size = np.zeros(4, dtype=np.int64)
    where = np.empty(n, dtype=np.int64)
    for v in range(n):
        k = states[v] & 3
        where[v] = size[k]
        members[k, size[k]] = v
        size[k] += 1
    total_pairs = n * (n - 1) // 2
    meta[M_STOP] = STOP_NONE
    while True:
        nA = size[0]
        nB = size[1]
        na = size[2]
        nb_ = size[3]
        wrong = (nB + nb_) if maj == 0 else (nA + na)
        if nA + na == n or nB + nb_ == n:
            meta[M_STOP] = STOP_STABLE
            meta[M_STABLE_AT] = t
            break
        w1 = nA * nB
        w2 = nA * nb_
        w3 = nB * na
        w = w1 + w2 + w3
        if w == 0:
            # unreachable from valid inputs: weak-only mixed configuration
            if wrong > 0:
                meta[M_LAST_WRONG] = max_t
            t = max_t
            meta[M_STOP] = STOP_MAX
            break
        p = w / total_pairs
        skip = 0
        if p < 1.0:
            u = _rng.uniform(rs)
            skip = np.int64(math.floor(math.log1p(-u) / math.log1p(-p)))
        if t + skip + 1 > max_t:
            if wrong > 0:
                meta[M_LAST_WRONG] = max_t
            t = max_t
            meta[M_STOP] = STOP_MAX
            break
        if wrong > 0:
            meta[M_LAST_WRONG] = t + skip
        t += skip + 1
        r = _rng.bounded(rs, w) if w < 4294967296 else np.int64(_rng.uniform(rs) * w)
        if r < w1:
            ka, kb = 0, 1
        elif r < w1 + w2:
            ka, kb = 0, 3
        else:
            ka, kb = 1, 2
        x = members[ka, _rng.bounded(rs, size[ka])]
        y = members[kb, _rng.bounded(rs, size[kb])]
        na_, nb2 = four_state_delta(ka, kb)
        for v, old, new in ((x, ka, na_), (y, kb, nb2)):
            if old != new:
                pos = where[v]
                last = members[old, size[old] - 1]
                members[old, pos] = last
                where[last] = pos
                size[old] -= 1
                where[v] = size[new]
                members[new, size[new]] = v
                size[new] += 1
                states[v] = (states[v] & ~np.int64(3)) | new
        nA = size[0]
        nB = size[1]
        wrong = (nB + size[3]) if maj == 0 else (nA + size[2])
        if wrong > 0:
            meta[M_LAST_WRONG] = t
    meta[M_T] = t


# ------------------------------------------------------------------ driver

class Monitor:
    """Hooks called by :func:`run` between kernel chunks.

    ``next_pause(t)`` returns an absolute interaction count to pause at (or
    None); ``epoch_watch()`` returns ``(epoch, threshold)`` to pause when that
    many nodes are in ``epoch`` (or None); ``observe(config, reason)`` is called
    at every pause with the live configuration.
    """

    def next_pause(self, t: int) -> Optional[int]:
        return None

    def epoch_watch(self) -> Optional[Tuple[int, int]]:
        return None

    def observe(self, config: Configuration, reason: str) -> None:
        pass


def run(
    protocol: ProtocolDefinition,
    instance: InputInstance,
    seed: int = 0,
    stream: int = 0,
    max_interactions: Optional[int] = None,
    trace: bool = False,
    trace_limit: int = 1_000_000,
    fast_backup: bool = True,
    monitor: Optional[Monitor] = None,
    states: Optional[np.ndarray] = None,
) -> Tuple[Configuration, RunMetrics, Optional[EventTrace]]:
    """Simulate until the protocol's stability predicate holds or the budget runs out.

    With ``fast_backup`` the all-fail tail (or a standalone four-state run) is
    finished by :func:`backup_tail`, which consumes random numbers differently
    from the plain loop; tracing disables it so that every interaction is logged.
    """
    if not isinstance(instance, InputInstance):
        raise TypeError("instance must be an InputInstance")
    if protocol.n != instance.n:
        raise InvalidInstance(f"protocol built for n={protocol.n}, instance has n={instance.n}")
    if max_interactions is None:
        max_interactions = default_max_interactions(instance.n, protocol)
    if max_interactions <= 0:
        raise ValueError("max_interactions must be positive")
    n = instance.n
    prepare, kernel, _, _ = _kernels(protocol)
    if states is None:
        states = protocol.initial(instance)
    states = np.ascontiguousarray(states, dtype=np.int64).copy()
    rs = _rng.make_state(seed, stream)
    pvt = protocol.pv_tuple

    kl = np.empty(n, np.int64)
    out = np.empty(n, np.int64)
    ep = np.empty(n, np.int64)
    val = np.empty(n, np.int64)
    aux = np.empty(n, np.int64)
    counts = np.zeros(protocol.n_classes, np.int64)
    ecount = np.zeros(max(1, protocol.n_epochs), np.int64)
    meta = _initial_meta(protocol, instance, max_interactions, fast_backup and not trace)
    cap = trace_limit if trace else 0
    meta[M_TRACE_CAP] = cap
    tr_t = np.empty(cap, np.int64)
    tr_ij = np.empty((cap, 2), np.int64)
    tr_before = np.empty((cap, 2), np.int64)
    tr_after = np.empty((cap, 2), np.int64)

    is_stable = prepare(states, kl, out, ep, val, aux, counts, ecount, pvt, meta)
    if meta[M_WRONG] > 0:
        meta[M_LAST_WRONG] = 0
    meta[M_OOS_MAX] = meta[M_OOS]
    if int(np.sum(val)) != meta[M_EXPECTED]:
        meta[M_CONS_VIOL] += 1
        meta[M_CONS_FIRST] = 0
    used_tail = False
    if is_stable:
        meta[M_STABLE_AT] = 0
        meta[M_STOP] = STOP_STABLE
    else:
        use_tail_now = fast_backup and not trace and _is_four_state(protocol)
        while True:
            if use_tail_now:
                used_tail = True
                meta[M_CONS_ACTIVE] = 0
                backup_tail(states, rs, meta)
                prepare(states, kl, out, ep, val, aux, counts, ecount, pvt, meta)
                break
            if monitor is not None:
                pause = monitor.next_pause(int(meta[M_T]))
                meta[M_PAUSE_AT] = -1 if pause is None else pause
                watch = monitor.epoch_watch()
                if watch is None or not 0 <= watch[0] < len(ecount):
                    meta[M_WATCH_EPOCH] = -1
                else:
                    meta[M_WATCH_EPOCH], meta[M_WATCH_THR] = watch
            kernel(states, kl, out, ep, val, aux, counts, ecount, rs, pvt, meta,
                   tr_t, tr_ij, tr_before, tr_after)
            stop = meta[M_STOP]
            if stop in (STOP_STABLE, STOP_MAX):
                break
            if stop == STOP_BACKUP:
                use_tail_now = True
                continue
            if monitor is not None and stop in (STOP_WATCH, STOP_PAUSE):
                monitor.observe(Configuration(states, int(meta[M_T])),
                                "watch" if stop == STOP_WATCH else "pause")

    config = Configuration(states, int(meta[M_T]))
    metrics = _metrics(protocol, instance, seed, stream, meta, used_tail)
    tr = None
    if trace:
        m = int(meta[M_TRACE_LEN])
        tr = EventTrace(tr_t[:m].copy(), tr_ij[:m, 0].copy(), tr_ij[:m, 1].copy(),
                        tr_before[:m].copy(), tr_after[:m].copy(), truncated=m >= cap and config.interaction_count > m)
    return config, metrics, tr


def _initial_meta(protocol, instance, max_interactions, backup_stop):
    meta = np.zeros(M_SIZE, np.int64)
    for k in (M_LAST_WRONG, M_STABLE_AT, M_FIRST_FAIL, M_FIRST_DONE, M_FIRST_ADD, M_CONS_FIRST,
              M_WATCH_EPOCH, M_PAUSE_AT):
        meta[k] = -1
    meta[M_MAJ] = instance.majority
    meta[M_MAX_T] = max_interactions
    meta[M_CONS_ACTIVE] = 1
    meta[M_BACKUP_STOP] = 1 if backup_stop else 0
    meta[M_EXPECTED] = protocol.expected_sum(instance.a0, instance.b0)
    meta[M_CMASK] = protocol.cmask
    return meta


def run_many(
    protocol: ProtocolDefinition,
    instance: InputInstance,
    seed: int = 0,
    streams=None,
    runs: Optional[int] = None,
    max_interactions: Optional[int] = None,
    fast_backup: bool = True,
) -> List[RunMetrics]:
    """Run one seed over several streams inside a single compiled loop.

    Each run uses exactly the random stream :func:`run` would use for the same
    ``(seed, stream)``, so results are identical to calling :func:`run` in a
    loop (without tracing or a monitor). ``streams`` defaults to ``range(runs)``.
    """
    if protocol.n != instance.n:
        raise InvalidInstance(f"protocol built for n={protocol.n}, instance has n={instance.n}")
    if streams is None:
        if runs is None:
            raise ValueError("give streams or runs")
        streams = range(runs)
    streams = list(streams)
    if max_interactions is None:
        max_interactions = default_max_interactions(instance.n, protocol)
    if max_interactions <= 0:
        raise ValueError("max_interactions must be positive")
    _, _, _, batch = _kernels(protocol)
    init = np.ascontiguousarray(protocol.initial(instance), dtype=np.int64)
    rs_all = np.empty((len(streams), 4), np.uint64)
    for r, st in enumerate(streams):
        rs_all[r] = _rng.make_state(seed, st)
    meta0 = _initial_meta(protocol, instance, max_interactions, fast_backup)
    results = np.empty((len(streams), M_SIZE), np.int64)
    used = np.zeros(len(streams), np.bool_)
    tail_start = bool(fast_backup and _is_four_state(protocol))
    batch(init, rs_all, protocol.pv_tuple, meta0, protocol.n_classes, max(1, protocol.n_epochs),
          tail_start, results, used)
    return [_metrics(protocol, instance, seed, st, results[r], bool(used[r]))
            for r, st in enumerate(streams)]


def _is_four_state(protocol) -> bool:
    return protocol.name == "fourstate" and not protocol.extended


def _metrics(protocol, instance, seed, stream, meta, used_tail) -> RunMetrics:
    t = int(meta[M_T])
    stable_at = int(meta[M_STABLE_AT])
    wrong = int(meta[M_WRONG])
    if stable_at >= 0:
        if wrong > 0:
            outcome = INCORRECT
        elif _is_four_state(protocol):
            outcome = CORRECT_STABLE
        elif not protocol.extended:
            outcome = CORRECT_DONE
        elif meta[M_DONES] == instance.n:
            outcome = CORRECT_DONE
        else:
            outcome = ALL_FAIL_BACKUP
        ts = stable_at
    else:
        outcome = TIMEOUT
        ts = None
    last_wrong = int(meta[M_LAST_WRONG])
    if wrong > 0:
        tc = None
    else:
        tc = 0 if last_wrong < 0 else last_wrong + 1
    final_epoch = None
    if meta[M_FIRST_ADD] >= 0 and hasattr(protocol.fast or protocol, "final_epoch_of"):
        final_epoch = (protocol.fast or protocol).final_epoch_of(int(meta[M_ADD_STATE]) >> 2)
    restore = {0: None, 1: True, 2: False, 3: None}[int(meta[M_RESTORE])]
    return RunMetrics(
        n=instance.n,
        a0=instance.a0,
        b0=instance.b0,
        seed=seed,
        stream=stream,
        outcome=outcome,
        interactions=t,
        stabilization_interactions=ts,
        convergence_interactions=tc,
        first_done=None if meta[M_FIRST_DONE] < 0 else int(meta[M_FIRST_DONE]),
        first_fail=None if meta[M_FIRST_FAIL] < 0 else int(meta[M_FIRST_FAIL]),
        additional_epoch_at=None if meta[M_FIRST_ADD] < 0 else int(meta[M_FIRST_ADD]),
        final_epoch=final_epoch,
        oos_max=int(meta[M_OOS_MAX]),
        conservation_violations=int(meta[M_CONS_VIOL]),
        first_violation=None if meta[M_CONS_FIRST] < 0 else int(meta[M_CONS_FIRST]),
        restore_check=restore,
        backup_fast_forward=used_tail,
    )


def snapshot(config: Configuration, protocol: ProtocolDefinition, step_bucket: int = 1) -> Dict[str, Any]:
    """Aggregate census of a configuration (pure)."""
    tokens: Counter = Counter()
    times: Counter = Counter()
    roles: Counter = Counter()
    for s in config.states:
        f = protocol.fields(int(s))
        roles[f.get("role", "worker")] += 1
        if "token" in f:
            tokens[(f["token"], f.get("age", 0), f["status"])] += 1
        # clocks have a step but no epoch, workers of the split protocol the reverse
        step = f.get("step")
        times[(f.get("epoch"), None if step is None else step // step_bucket)] += 1
    return {"n": config.n, "roles": dict(roles), "tokens": dict(tokens), "time": dict(times)}
