"""Clock/worker split: workers carry tokens, clocks keep time.

Nodes start unassigned. The first meeting of two unassigned nodes makes the
initiator a clock and the responder a worker holding both input tokens; an
unassigned node meeting an assigned one becomes a worker with its own token.
This is the only ordered (asymmetric) rule.

Clocks count clock-clock interactions modulo the epoch length ``E = 2F``.
Workers have no counters: they read clocks and record only
``(epoch_part, stage)`` of the latest reading, plus the implicit phase
(``age - doubled`` for a normal token, the age field itself for an empty
worker). Out-of-sync and heavy tokens do not track their phase.

Packed layout (an ``int64``)::

    bits 0-1    token        0 empty, 1 A, 2 B (the opinion of an unassigned node)
    bits 2-3    status       NORMAL, DONE_A, DONE_B, FAIL
    bit  4      doubled
    bit  5      out_of_sync
    bit  6      additional_epoch
    bit  7      heavy
    bits 8-9    role         0 worker, 1 clock, 2 unassigned
    bits 10-13  age_in_epoch (phase of an empty worker in part 0)
    bits 14-19  epoch; in the additional epoch, the final epoch j_f
    bit  20     epoch_part
    bits 21-23  stage
    bits 24-32  snapshots, 3 bits each: 0 empty, 1 A, 2 B, 3 heavy A, 4 heavy B
    bits 33-38  phase of the additional epoch (0 while waiting for it to start)
    bits 40-    clock step
"""

from dataclasses import dataclass
import math
from typing import Optional, Tuple

import numba as nb
import numpy as np

from popmajority.protocols.base import (
    AUX_ADD,
    AUX_DONE,
    AUX_FAIL,
    AUX_NEUTRAL,
    AUX_OOS,
    DONE_A,
    DONE_B,
    FAIL,
    NORMAL,
    STATUS_SUFFIX,
    ProtocolDefinition,
)
from popmajority.protocols.fastmajority1 import _get, _set, fail_state, icbrt_ceil
from popmajority.protocols.majority import TOKEN_B, TOKEN_NAMES, lam_of

DEFAULT_C = 192
DEFAULT_ZONES = (0.1, 0.5, 0.6, 0.9)

STAGE_NAMES = ("beginning", "canceling", "middle", "doubling", "ending")
BEGINNING, CANCELING, MIDDLE, DOUBLING, ENDING = range(5)

ROLE_WORKER, ROLE_CLOCK, ROLE_UNASSIGNED = 0, 1, 2

F_DOUBLED = 16
F_OOS = 32
F_ADD = 64
F_HEAVY = 128

SH_ROLE = 8
SH_AGE = 10
SH_EPOCH = 14
SH_PART = 20
SH_STAGE = 21
SH_SNAP = 24
SH_K = 33
SH_STEP = 40

CMASK = (1 << SH_STEP) - 1

# pv indices
I_L, I_F, I_E, I_EMAX, I_TAU, I_P, I_Q, I_GMAX, I_LAM = range(9)
I_LZ, I_FZ, I_QZ = 9, 13, 17
I_AMAX, I_A0 = 21, 22


@dataclass(frozen=True)
class FM2Params:
    """Geometry shared by clocks and workers.

    ``zones`` are the stage boundaries as fractions of a phase (and of part 1,
    which has no phases). The additional epoch is triggered just after a
    clock wrap; it waits out the first quarter of the cycle and then runs
    ``3P`` phases of ``Q = floor(add_fraction * (3E/4) / 3P)`` clock steps.
    """

    n: int
    C: float = DEFAULT_C
    c: Optional[float] = None
    zones: Tuple[float, float, float, float] = DEFAULT_ZONES
    add_fraction: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.c is None:
            object.__setattr__(self, "c", self.C ** 0.75)
        z = tuple(self.zones)
        if len(z) != 4 or not 0 < z[0] < z[1] < z[2] < z[3] < 1:
            raise ValueError(f"zones must be four increasing fractions in (0, 1), got {z}")
        object.__setattr__(self, "zones", z)
        if not 0 < self.add_fraction <= 1:
            raise ValueError("add_fraction must lie in (0, 1]")
        if self.phase_len < 10 or self.add_phase_len < 10:
            raise ValueError("phases too short for five stages; increase C")
        if self.E_max + 2 >= 64 or self.epoch_len >= 1 << 21 or self.P >= 15:
            raise ValueError("parameters exceed the packed state layout")

    @property
    def lam(self) -> int:
        return lam_of(self.n)

    @property
    def P(self) -> int:
        return icbrt_ceil(self.lam)

    @property
    def phase_len(self) -> int:
        return int(math.floor(self.C * math.ceil(self.lam / self.P)))

    @property
    def first_part_len(self) -> int:
        return self.P * self.phase_len

    @property
    def epoch_len(self) -> int:
        return 2 * self.first_part_len

    @property
    def E_max(self) -> int:
        return math.ceil(self.lam / self.P) + 2

    @property
    def tau(self) -> int:
        return math.ceil(self.C * self.lam / 4)

    @property
    def add_phases(self) -> int:
        return 3 * self.P

    @property
    def add_phase_len(self) -> int:
        return int(math.floor(self.add_fraction * (self.epoch_len - self.add_start) / self.add_phases))

    @property
    def add_start(self) -> int:
        return self.epoch_len // 4

    @property
    def gmax(self) -> int:
        return (self.E_max + 2) * self.P + 2

    def zone_bounds(self, length: int):
        return tuple(int(math.floor(f * length)) for f in self.zones)

    def stage_of(self, step: int, length: int) -> int:
        for k, b in enumerate(self.zone_bounds(length)):
            if step < b:
                return k
        return ENDING

    def reading(self, epoch_step: int):
        """``(epoch_part, phase, stage)`` shown by a clock; phase is None in part 1."""
        if not 0 <= epoch_step < self.epoch_len:
            raise ValueError(f"epoch_step {epoch_step} outside [0, {self.epoch_len})")
        F, L = self.first_part_len, self.phase_len
        if epoch_step >= F:
            return 1, None, self.stage_of(epoch_step - F, F)
        return 0, epoch_step // L, self.stage_of(epoch_step % L, L)

    def pv(self) -> np.ndarray:
        return np.array(
            [self.phase_len, self.first_part_len, self.epoch_len, self.E_max, self.tau, self.P,
             self.add_phase_len, self.gmax, self.lam,
             *self.zone_bounds(self.phase_len), *self.zone_bounds(self.first_part_len),
             *self.zone_bounds(self.add_phase_len), self.add_phases, self.add_start],
            dtype=np.int64,
        )


# ------------------------------------------------------------------ fields

@nb.njit(inline="always")
def _status(s):
    return (s >> 2) & 3


@nb.njit(inline="always")
def _role(s):
    return (s >> SH_ROLE) & 3


@nb.njit(inline="always")
def _zone(x, pv, b):
    if x < pv[b]:
        return 0
    if x < pv[b + 1]:
        return 1
    if x < pv[b + 2]:
        return 2
    if x < pv[b + 3]:
        return 3
    return 4


@nb.njit(inline="always")
def _zone_start(z, pv, b):
    if z == 0:
        return np.int64(0)
    return pv[b + z - 1]


@nb.njit(inline="always")
def _snap_code(s):
    tok = s & 3
    if tok != 0 and s & F_HEAVY:
        return tok + 2
    return tok


@nb.njit(inline="always")
def new_worker(tok, heavy):
    s = np.int64(tok)
    if heavy:
        s |= F_HEAVY | F_OOS
    code = tok + 2 if heavy else tok
    return s | (np.int64(code) << SH_SNAP)


@nb.njit(inline="always")
def new_clock():
    return np.int64(ROLE_CLOCK << SH_ROLE)


# ------------------------------------------------------------------ initialization

@nb.njit(inline="always")
def init_delta(s1, s2):
    """At least one side unassigned and neither side a terminator."""
    u1 = _role(s1) == ROLE_UNASSIGNED
    u2 = _role(s2) == ROLE_UNASSIGNED
    if u1 and u2:
        t1 = s1 & 3
        t2 = s2 & 3
        if t1 != t2:
            return new_clock(), new_worker(0, False)
        return new_clock(), new_worker(t2, True)
    if u1:
        return new_worker(s1 & 3, False), s2
    return s1, new_worker(s2 & 3, False)


# ------------------------------------------------------------------ clocks

@nb.njit(inline="always")
def clock_clock_delta(c1, c2, pv):
    E = pv[I_E]
    x1 = c1 >> SH_STEP
    x2 = c2 >> SH_STEP
    d = (x1 - x2) % E
    if d > E - d:
        d = E - d
    if d > pv[I_TAU]:
        return fail_state(), fail_state()
    q = E // 4
    base = np.int64(ROLE_CLOCK << SH_ROLE)
    if x1 >= E - q and x2 < q:
        return base, base | (((x2 + 1) % E) << SH_STEP)
    if x2 >= E - q and x1 < q:
        return base | (((x1 + 1) % E) << SH_STEP), base
    return base | (((x1 + 1) % E) << SH_STEP), base | (((x2 + 1) % E) << SH_STEP)


# ------------------------------------------------------------------ main epochs

@nb.njit(inline="always")
def _phase(s):
    return _get(s, SH_AGE, 4) - ((s >> 4) & 1)


@nb.njit(inline="always")
def _main_lb(s, pv):
    """Earliest epoch step consistent with the worker's recorded progress."""
    z = _get(s, SH_STAGE, 3)
    if _get(s, SH_PART, 1):
        return pv[I_F] + _zone_start(z, pv, I_FZ)
    if s & (F_OOS | F_HEAVY):
        return np.int64(0)
    return _phase(s) * pv[I_L] + _zone_start(z, pv, I_LZ)


@nb.njit(inline="always")
def join_additional(s, jf):
    """Restore the token held at the start of epoch max(jf-1, 0) and enter the additional epoch."""
    k = _get(s, SH_EPOCH, 6) - max(jf - 1, 0)
    if k < 0 or k > 2:
        return fail_state()
    code = _get(s, SH_SNAP + 3 * k, 3)
    # snapshots are not needed after the restore and are dropped
    if code > 2:
        return (code - 2) | F_HEAVY | F_ADD | (np.int64(jf) << SH_EPOCH)
    return code | F_ADD | (np.int64(jf) << SH_EPOCH)


@nb.njit(inline="always")
def epoch_rollover(s, pv):
    tok = s & 3
    epoch = _get(s, SH_EPOCH, 6)
    if tok != 0 and _get(s, SH_AGE, 4) < pv[I_P]:
        return join_additional(s, epoch)
    epoch += 1
    if epoch >= pv[I_EMAX]:
        return fail_state()
    snaps = ((_get(s, SH_SNAP, 9) << 3) & 511) | _snap_code(s)
    return tok | (epoch << SH_EPOCH) | (snaps << SH_SNAP)


@nb.njit(inline="always")
def _adopt(s, r, pv):
    """Move a main-epoch worker forward to clock reading ``r`` of its own epoch."""
    F = pv[I_F]
    if r >= F:
        part2 = 1
        p2 = pv[I_P]
        z2 = _zone(r - F, pv, I_FZ)
    else:
        part2 = 0
        p2 = r // pv[I_L]
        z2 = _zone(r % pv[I_L], pv, I_LZ)
    if _get(s, SH_PART, 1) == 0 and s & (F_OOS | F_HEAVY) == 0:
        p1 = _phase(s)
        if p2 > p1:
            if s & 3:
                # phase boundaries crossed: a token that did not split each time is out of sync
                if p2 - p1 >= 2 or s & F_DOUBLED == 0:
                    s = s | F_OOS
                s = s & ~np.int64(F_DOUBLED)
            else:
                s = _set(s, SH_AGE, 4, p2 if part2 == 0 else 0)
    s = _set(_set(s, SH_PART, 1, part2), SH_STAGE, 3, z2)
    if part2 == 1 and s & F_OOS and s & 3 and _get(s, SH_AGE, 4) == pv[I_P]:
        s = s & ~np.int64(F_OOS)
    return s


@nb.njit(inline="always")
def _read_main(w, r, pv):
    """Worker reads clock step ``r``; second value is True when the clock must fail too."""
    E = pv[I_E]
    lb = _main_lb(w, pv)
    ahead = (r - lb) % E
    slack = 0
    if w & (F_OOS | F_HEAVY) and _get(w, SH_PART, 1) == 0:
        # no phase recorded: anywhere in part 0, so accept readings up to 3/4 of the cycle
        slack = pv[I_F] // 2
    if ahead > E // 2 + slack:
        if E - ahead > pv[I_TAU]:
            return fail_state(), True
        return w, False
    if r < lb:
        w = epoch_rollover(w, pv)
        if _status(w) != NORMAL or w & F_ADD:
            return w, False
    return _adopt(w, r, pv), False


@nb.njit(inline="always")
def _split_to(s, tok, age, pv):
    """Give ``s`` a non-heavy out-of-sync token of ``age`` (synchronized again at age P in part 1)."""
    s = _set((s & ~np.int64(3 | F_HEAVY | F_DOUBLED)) | tok | F_OOS, SH_AGE, 4, age)
    if _get(s, SH_PART, 1) == 1 and age == pv[I_P]:
        s = s & ~np.int64(F_OOS)
    return s


@nb.njit(inline="always")
def main_worker_delta(s1, s2, pv):
    e1 = _get(s1, SH_EPOCH, 6)
    e2 = _get(s2, SH_EPOCH, 6)
    if e1 != e2:
        if e1 - e2 >= 2 or e2 - e1 >= 2:
            return fail_state(), fail_state()
        return s1, s2
    t1 = s1 & 3
    t2 = s2 & 3
    if t1 != 0 and t2 != 0:
        if (t1 != t2 and (s1 | s2) & (F_OOS | F_HEAVY) == 0
                and _get(s1, SH_PART, 1) == 0 and _get(s2, SH_PART, 1) == 0
                and _get(s1, SH_STAGE, 3) == CANCELING and _get(s2, SH_STAGE, 3) == CANCELING
                and _get(s1, SH_AGE, 4) == _get(s2, SH_AGE, 4)):
            # the age field of an empty worker keeps its phase, which equals the age here
            return s1 & ~np.int64(3), s2 & ~np.int64(3)
        return s1, s2
    if t1 == 0 and t2 == 0:
        return s1, s2
    if t1 != 0:
        a, b, ta = s1, s2, t1
    else:
        a, b, ta = s2, s1, t2
    age = _get(a, SH_AGE, 4)
    if a & F_HEAVY:
        if (b & F_OOS == 0 and _get(b, SH_PART, 1) == 0 and _get(b, SH_STAGE, 3) <= CANCELING
                and _get(b, SH_AGE, 4) == age):
            # both halves still have this phase's doubling ahead of them
            pos = b & (np.int64(15) << SH_PART)
            a = (a & ~np.int64(F_HEAVY | F_OOS | (np.int64(15) << SH_PART))) | pos
            b = b | ta
        else:
            a = _split_to(a, ta, age, pv)
            b = _split_to(b, ta, age, pv)
    elif a & F_OOS:
        if age >= pv[I_P]:
            return s1, s2
        a = _split_to(a, ta, age + 1, pv)
        b = _split_to(b, ta, age + 1, pv)
    elif (a & F_DOUBLED == 0 and b & F_OOS == 0
          and _get(a, SH_PART, 1) == 0 and _get(b, SH_PART, 1) == 0
          and _get(a, SH_STAGE, 3) == DOUBLING and _get(b, SH_STAGE, 3) == DOUBLING
          and _get(b, SH_AGE, 4) == age):
        a = _set(a, SH_AGE, 4, age + 1) | F_DOUBLED
        b = _set(b | ta, SH_AGE, 4, age + 1) | F_DOUBLED
    else:
        return s1, s2
    if t1 != 0:
        return a, b
    return b, a


# ------------------------------------------------------------------ additional epoch

@nb.njit(inline="always")
def _a_rollover(s):
    """End of an additional phase: done on a token that failed to split, else the next phase."""
    tok = s & 3
    if tok != 0 and (s & F_DOUBLED == 0 or s & F_HEAVY):
        return s | (tok << 2)
    k = _get(s, SH_K, 6) + 1
    return _set(s, SH_K, 6, k) & ~np.int64(F_DOUBLED)


@nb.njit(inline="always")
def _read_add(w, r, pv):
    E = pv[I_E]
    Q = pv[I_Q]
    a0 = pv[I_A0]
    k = _get(w, SH_K, 6)
    if k == 0:
        # clocks straddle the wrap when the epoch is triggered; late readings
        # of the previous cycle must not start it
        if r < a0 or r >= E - E // 8:
            return w, False
        w = _set(w, SH_K, 6, 1)
        k = 1
    else:
        lb = a0 + (k - 1) * Q + _zone_start(_get(w, SH_STAGE, 3), pv, I_QZ)
        ahead = (r - lb) % E
        if ahead > E // 2:
            if E - ahead > pv[I_TAU]:
                return fail_state(), True
            return w, False
        if r < lb:
            # a whole cycle passed: the additional epoch ran out of phases
            return fail_state(), False
    q = min((r - a0) // Q, pv[I_AMAX] - 1)
    for _ in range(q + 1 - k):
        w = _a_rollover(w)
        if _status(w) != NORMAL:
            return w, False
    return _set(w, SH_STAGE, 3, _zone(r - a0 - q * Q, pv, I_QZ)), False


@nb.njit(inline="always")
def add_worker_delta(s1, s2):
    if _get(s1, SH_EPOCH, 6) != _get(s2, SH_EPOCH, 6):
        return fail_state(), fail_state()
    k1 = _get(s1, SH_K, 6)
    k2 = _get(s2, SH_K, 6)
    if k1 - k2 >= 2 or k2 - k1 >= 2:
        return fail_state(), fail_state()
    if k1 != k2:
        return s1, s2
    t1 = s1 & 3
    t2 = s2 & 3
    z1 = _get(s1, SH_STAGE, 3)
    z2 = _get(s2, SH_STAGE, 3)
    if t1 != 0 and t2 != 0:
        if (t1 != t2 and k1 >= 1 and z1 == CANCELING and z2 == CANCELING
                and (s1 | s2) & F_HEAVY == 0):
            return s1 & ~np.int64(3), s2 & ~np.int64(3)
        return s1, s2
    if t1 == 0 and t2 == 0:
        return s1, s2
    if t1 != 0:
        a, b, ta = s1, s2, t1
    else:
        a, b, ta = s2, s1, t2
    if a & F_HEAVY:
        a = a & ~np.int64(F_HEAVY)
        b = b | ta
    elif a & F_DOUBLED == 0 and k1 >= 1 and z1 == DOUBLING and z2 == DOUBLING:
        a = a | F_DOUBLED
        b = b | ta | F_DOUBLED
    else:
        return s1, s2
    if t1 != 0:
        return a, b
    return b, a


@nb.njit(inline="always")
def _join_from(s, partner):
    """``s`` meets an additional-epoch worker: restore and copy its position."""
    s = join_additional(s, _get(partner, SH_EPOCH, 6))
    if _status(s) != NORMAL:
        return s
    pos = partner & ((np.int64(63) << SH_K) | (np.int64(7) << SH_STAGE))
    return s | pos


# ------------------------------------------------------------------ delta

@nb.njit(inline="always")
def _done_meets(d, other):
    """A done(d) node meets a normal node: returns (new other, ok)."""
    role = _role(other)
    if role == ROLE_CLOCK:
        return new_clock() | (np.int64(d) << 2), True
    if role == ROLE_UNASSIGNED or other & F_ADD == 0:
        return fail_state(), False
    tok = other & 3
    if tok != 0 and tok != d:
        return fail_state(), False
    return other | (np.int64(d) << 2), True


@nb.njit
def fm2_delta(s1, s2, pv):
    st1 = _status(s1)
    st2 = _status(s2)
    if st1 != NORMAL or st2 != NORMAL:
        if st1 == FAIL or st2 == FAIL:
            return fail_state(), fail_state()
        if st1 != NORMAL and st2 != NORMAL:
            if st1 == st2:
                return s1, s2
            return fail_state(), fail_state()
        if st1 != NORMAL:
            o, ok = _done_meets(st1, s2)
            if not ok:
                return fail_state(), fail_state()
            return s1, o
        o, ok = _done_meets(st2, s1)
        if not ok:
            return fail_state(), fail_state()
        return o, s2
    r1 = _role(s1)
    r2 = _role(s2)
    if r1 == ROLE_UNASSIGNED or r2 == ROLE_UNASSIGNED:
        return init_delta(s1, s2)
    if r1 == ROLE_CLOCK and r2 == ROLE_CLOCK:
        return clock_clock_delta(s1, s2, pv)
    if r1 == ROLE_CLOCK or r2 == ROLE_CLOCK:
        if r1 == ROLE_CLOCK:
            c, w = s1, s2
        else:
            c, w = s2, s1
        r = c >> SH_STEP
        if w & F_ADD:
            w, both = _read_add(w, r, pv)
        else:
            w, both = _read_main(w, r, pv)
        if both:
            return fail_state(), fail_state()
        if r1 == ROLE_CLOCK:
            return c, w
        return w, c
    a1 = s1 & F_ADD
    a2 = s2 & F_ADD
    if a1 or a2:
        if not a1:
            s1 = _join_from(s1, s2)
        elif not a2:
            s2 = _join_from(s2, s1)
        if _status(s1) != NORMAL or _status(s2) != NORMAL:
            return fail_state(), fail_state()
        return add_worker_delta(s1, s2)
    return main_worker_delta(s1, s2, pv)


@nb.njit
def fm2_classify(s, pv):
    status = (s >> 2) & 3
    if status == FAIL:
        return status, -1, -1, 0, AUX_FAIL
    role = (s >> SH_ROLE) & 3
    if role == ROLE_CLOCK:
        if status != NORMAL:
            return status, status - 1, -1, 0, AUX_DONE | AUX_NEUTRAL
        return status, -1, -1, 0, AUX_NEUTRAL
    tok = s & 3
    if role == ROLE_UNASSIGNED:
        value = np.int64(1) << pv[I_GMAX]
        if tok == TOKEN_B:
            value = -value
        return status, tok - 1, 0, value, 0
    aux = 0
    if s & F_ADD:
        aux |= AUX_ADD
        age = max(_get(s, SH_EPOCH, 6) - 1, 0) * pv[I_P] + max(_get(s, SH_K, 6) - 1, 0) + ((s >> 4) & 1)
        epoch = -1
    else:
        age = _get(s, SH_EPOCH, 6) * pv[I_P] + _get(s, SH_AGE, 4)
        epoch = _get(s, SH_EPOCH, 6)
    if s & F_OOS:
        aux |= AUX_OOS
    value = 0
    if tok != 0:
        value = np.int64(1) << (pv[I_GMAX] - age)
        if s & F_HEAVY:
            value <<= 1
        if tok == TOKEN_B:
            value = -value
    if status != NORMAL:
        return status, status - 1, -1, value, aux | AUX_DONE
    out = tok - 1 if tok != 0 else -1
    return status, out, epoch, value, aux


@nb.njit
def _fast_stable(counts, n):
    return counts[DONE_A] == n or counts[DONE_B] == n or counts[FAIL] == n


# ------------------------------------------------------------------ text

_FLAG_ORDER = (("d", F_DOUBLED), ("o", F_OOS), ("x", F_ADD))
_SNAP_NAMES = ("-", "A", "B", "a", "b")


def unpack(s: int, params: FM2Params) -> dict:
    s = int(s)
    role = (s >> SH_ROLE) & 3
    f = {
        "role": ("worker", "clock", "unassigned")[role],
        "status": ("normal", "done-A", "done-B", "fail")[(s >> 2) & 3],
    }
    if role == ROLE_UNASSIGNED:
        f["token"] = TOKEN_NAMES[s & 3]
        return f
    if role == ROLE_CLOCK:
        f["step"] = s >> SH_STEP
        if f["step"] < params.epoch_len:
            f["part"], f["phase"], stage = params.reading(f["step"])
            f["stage"] = STAGE_NAMES[stage]
        return f
    f.update(
        token=TOKEN_NAMES[s & 3],
        heavy=bool(s & F_HEAVY),
        doubled=bool(s & F_DOUBLED),
        out_of_sync=bool(s & F_OOS),
        additional_epoch=bool(s & F_ADD),
        epoch=(s >> SH_EPOCH) & 63,
        age=(s >> SH_AGE) & 15,
        part=(s >> SH_PART) & 1,
        stage=STAGE_NAMES[min((s >> SH_STAGE) & 7, ENDING)],
        snapshots=tuple(_SNAP_NAMES[min((s >> (SH_SNAP + 3 * k)) & 7, 4)] for k in range(3)),
    )
    if f["additional_epoch"]:
        f["aphase"] = (s >> SH_K) & 63
    return f


def encode(s: int, params: FM2Params) -> str:
    s = int(s)
    role = (s >> SH_ROLE) & 3
    suffix = STATUS_SUFFIX[(s >> 2) & 3]
    if role == ROLE_UNASSIGNED:
        return f"U2:{TOKEN_NAMES[s & 3]}"
    if role == ROLE_CLOCK:
        return f"C2:{s >> SH_STEP}:{suffix or '-'}"
    f = unpack(s, params)
    flags = "".join(ch for ch, bit in _FLAG_ORDER if s & bit)
    if f["additional_epoch"]:
        part = f"x{f['aphase']}"
    else:
        part = str(f["part"])
    flags += suffix
    return (f"W2:{f['token']}:{int(f['heavy'])}:{f['epoch']}:{f['age']}:{part}:{f['stage']}:"
            f"{flags or '-'}:{''.join(f['snapshots'])}")


def decode(text: str, params: FM2Params) -> int:
    parts = text.split(":")
    status_lookup = {v: k for k, v in STATUS_SUFFIX.items() if v}
    if parts[0] == "U2" and len(parts) == 2 and parts[1] in "AB" and parts[1]:
        return TOKEN_NAMES.index(parts[1]) | (ROLE_UNASSIGNED << SH_ROLE)
    if parts[0] == "C2" and len(parts) == 3:
        status = NORMAL if parts[2] == "-" else status_lookup.get(parts[2])
        if status is None:
            raise ValueError(f"bad clock flags in {text!r}")
        step = int(parts[1])
        if not 0 <= step < params.epoch_len:
            raise ValueError(f"clock step out of range in {text!r}")
        return (ROLE_CLOCK << SH_ROLE) | (status << 2) | (step << SH_STEP)
    if parts[0] != "W2" or len(parts) != 9:
        raise ValueError(f"not a FastMajority2 state encoding: {text!r}")
    _, tok, heavy, epoch, age, part, stage, flags, snap = parts
    if tok not in TOKEN_NAMES or heavy not in ("0", "1") or stage not in STAGE_NAMES:
        raise ValueError(f"bad field in {text!r}")
    if len(snap) != 3 or any(ch not in _SNAP_NAMES for ch in snap):
        raise ValueError(f"bad snapshot field in {text!r}")
    s = TOKEN_NAMES.index(tok) | (int(epoch) << SH_EPOCH) | (int(age) << SH_AGE)
    s |= STAGE_NAMES.index(stage) << SH_STAGE
    if heavy == "1":
        s |= F_HEAVY
    for k, ch in enumerate(snap):
        s |= _SNAP_NAMES.index(ch) << (SH_SNAP + 3 * k)
    if flags != "-":
        for suffix, code in status_lookup.items():
            if flags.endswith(suffix):
                s |= code << 2
                flags = flags[: -len(suffix)]
                break
        for ch in flags:
            bit = dict(_FLAG_ORDER).get(ch)
            if bit is None:
                raise ValueError(f"bad flag {ch!r} in {text!r}")
            s |= bit
    if part.startswith("x"):
        if not s & F_ADD:
            raise ValueError(f"additional-epoch part needs the x flag: {text!r}")
        s |= int(part[1:]) << SH_K
    elif part in ("0", "1"):
        s |= int(part) << SH_PART
    else:
        raise ValueError(f"bad part {part!r} in {text!r}")
    return s


def pack_worker(token=0, heavy=False, epoch=0, age=0, part=0, stage=BEGINNING, doubled=False,
                oos=False, status=NORMAL, snapshots=(0, 0, 0), additional=False, aphase=0) -> int:
    """Build a packed worker state from named fields (test and analysis helper)."""
    s = token | (status << 2) | (epoch << SH_EPOCH) | (age << SH_AGE)
    s |= (part << SH_PART) | (stage << SH_STAGE) | (aphase << SH_K)
    s |= (F_DOUBLED if doubled else 0) | (F_OOS if oos else 0) | (F_ADD if additional else 0)
    s |= F_HEAVY if heavy else 0
    for k, v in enumerate(snapshots):
        s |= v << (SH_SNAP + 3 * k)
    return s


def pack_clock(step=0, status=NORMAL) -> int:
    return (ROLE_CLOCK << SH_ROLE) | (status << 2) | (step << SH_STEP)


def pack_unassigned(opinion: int) -> int:
    """``opinion`` is 0 for A and 1 for B."""
    return (opinion + 1) | (ROLE_UNASSIGNED << SH_ROLE)


def role_of(s: int) -> str:
    return ("worker", "clock", "unassigned", "?")[(int(s) >> SH_ROLE) & 3]


def is_asymmetric(s1: int, s2: int) -> bool:
    """The initialization rule is the one ordered transition."""
    if (int(s1) >> 2) & 3 != NORMAL or (int(s2) >> 2) & 3 != NORMAL:
        return False
    return (int(s1) >> SH_ROLE) & 3 == ROLE_UNASSIGNED and (int(s2) >> SH_ROLE) & 3 == ROLE_UNASSIGNED


def final_epoch_of(add_state: int) -> int:
    return (int(add_state) >> SH_EPOCH) & 63


def fastmajority2_protocol(n: int, C: float = DEFAULT_C, c: Optional[float] = None,
                           zones=DEFAULT_ZONES, add_fraction: float = 1.0) -> ProtocolDefinition:
    params = FM2Params(n, C, c, tuple(zones), add_fraction)

    def initial(instance):
        states = np.full(instance.n, pack_unassigned(1), dtype=np.int64)
        states[: instance.a0] = pack_unassigned(0)
        return states

    proto = ProtocolDefinition(
        name="fastmajority2",
        n=n,
        params=params,
        pv=params.pv(),
        n_classes=4,
        n_epochs=params.E_max + 1,
        gmax=params.gmax,
        initial=initial,
        delta=fm2_delta,
        classify=fm2_classify,
        stable=_fast_stable,
        backup_only=_fast_stable,
        encode=lambda s: encode(s, params),
        decode=lambda t: decode(t, params),
        fields=lambda s: unpack(s, params),
        is_asymmetric=is_asymmetric,
        cmask=CMASK,
        # a clock meets another clock about once per two units of parallel time
        horizon=2.0 * (params.E_max + 1) * params.epoch_len,
    )
    proto.final_epoch_of = final_epoch_of
    return proto
