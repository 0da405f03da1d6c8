"""Short canceling/doubling phases grouped into epochs, with an additional epoch.

Packed fast-component layout (an ``int64``)::

    bits 0-1    token       0 empty, 1 A, 2 B
    bits 2-3    status      NORMAL, DONE_A, DONE_B, FAIL
    bit  4      doubled
    bit  5      out_of_sync
    bit  6      additional_epoch
    bits 7-10   age_in_epoch (unused in the additional epoch)
    bits 11-16  epoch; in the additional epoch, the final epoch j_f
    bits 17-22  token-type snapshots: current, previous, previous-previous
    bits 23-28  phase of the additional epoch
    bits 29-    epoch_step; in the additional epoch, the step in its phase

The epoch step combines ``(epoch_part, phase, phase_step)``: part 0 covers
steps ``[0, F)`` split into ``P`` phases of ``L`` steps, part 1 covers
``[F, 2F)``.
"""

from dataclasses import dataclass
import math
from typing import Optional

import numba as nb
import numpy as np

from popmajority.protocols.base import (
    AUX_ADD,
    AUX_DONE,
    AUX_FAIL,
    AUX_OOS,
    DONE_A,
    DONE_B,
    FAIL,
    NORMAL,
    STATUS_SUFFIX,
    ProtocolDefinition,
)
from popmajority.protocols.majority import TOKEN_B, TOKEN_NAMES, lam_of

DEFAULT_C = 224

SH_AGE = 7
SH_EPOCH = 11
SH_SNAP = 17
SH_APHASE = 23
SH_STEP = 29

F_DOUBLED = 16
F_OOS = 32
F_ADD = 64

CMASK = (1 << SH_STEP) - 1

# pv indices
I_L, I_F, I_E, I_EMAX, I_TAU, I_P, I_HALF = 0, 1, 2, 3, 4, 5, 6
I_LA, I_AE1, I_AE2, I_AE3, I_AE4, I_AMAX, I_GMAX, I_LAM = 7, 8, 9, 10, 11, 12, 13, 14


def icbrt_ceil(x: int) -> int:
    """Smallest integer p with p**3 >= x."""
    p = max(1, int(round(x ** (1 / 3))))
    while p ** 3 < x:
        p += 1
    while p > 1 and (p - 1) ** 3 >= x:
        p -= 1
    return p


@dataclass(frozen=True)
class FM1Params:
    """Integer geometry of the epoch/phase structure.

    ``c`` only enters the invariant monitors; the additional epoch uses
    Majority-style phases of ``add_C * lam`` steps with buffers of
    ``add_c * lam`` steps.
    """

    n: int
    C: float = DEFAULT_C
    c: Optional[float] = None
    add_C: Optional[float] = None
    add_c: Optional[float] = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.c is None:
            object.__setattr__(self, "c", self.C ** 0.75)
        if self.add_C is None:
            object.__setattr__(self, "add_C", self.C)
        if self.add_c is None:
            object.__setattr__(self, "add_c", self.add_C / 5)
        if not self.add_C > 3 * self.add_c > 0:
            raise ValueError("need add_C > 3 add_c > 0")
        if self.phase_len < 2:
            raise ValueError("phase length must be at least 2 steps")
        if self.E_max + 2 >= 64 or self.epoch_len >= 1 << 30:
            raise ValueError("parameters exceed the packed state layout")

    @property
    def lam(self) -> int:
        return lam_of(self.n)

    @property
    def a(self) -> float:
        return 1 / 3

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
    def cancel_len(self) -> int:
        return math.ceil(self.phase_len / 2)

    @property
    def E_max(self) -> int:
        return math.ceil(self.lam / self.P) + 2

    @property
    def tau(self) -> int:
        return math.ceil(self.C * self.lam / 4)

    @property
    def add_phase_len(self) -> int:
        return int(math.floor(self.add_C * self.lam))

    @property
    def add_part_lengths(self):
        buf = int(math.floor(self.add_c * self.lam))
        stage = int(math.floor((self.add_C - 3 * self.add_c) / 2 * self.lam))
        return (buf, stage, buf, stage, self.add_phase_len - 2 * buf - 2 * stage)

    @property
    def add_phases(self) -> int:
        return 3 * self.P

    @property
    def gmax(self) -> int:
        return (self.E_max + 2) * self.P + 2

    def locate(self, epoch_step: int):
        """``(epoch_part, phase, phase_step)`` of an epoch step; phase is None in part 1."""
        if not 0 <= epoch_step < self.epoch_len:
            raise ValueError(f"epoch_step {epoch_step} outside [0, {self.epoch_len})")
        if epoch_step >= self.first_part_len:
            return 1, None, epoch_step - self.first_part_len
        return 0, epoch_step // self.phase_len, epoch_step % self.phase_len

    def pv(self) -> np.ndarray:
        ends = np.cumsum(self.add_part_lengths[:4])
        return np.array(
            [self.phase_len, self.first_part_len, self.epoch_len, self.E_max, self.tau, self.P,
             self.cancel_len, self.add_phase_len, *ends, self.add_phases, self.gmax, self.lam],
            dtype=np.int64,
        )


# ------------------------------------------------------------------ fields

@nb.njit(inline="always")
def _get(s, sh, bits):
    return (s >> sh) & ((np.int64(1) << bits) - 1)


@nb.njit(inline="always")
def _set(s, sh, bits, v):
    m = ((np.int64(1) << bits) - 1) << sh
    return (s & ~m) | (np.int64(v) << sh)


@nb.njit(inline="always")
def _step(s):
    return s >> SH_STEP


@nb.njit(inline="always")
def _with_step(s, v):
    return (s & np.int64(CMASK)) | (np.int64(v) << SH_STEP)


@nb.njit(inline="always")
def fail_state():
    return np.int64(FAIL << 2)


@nb.njit(inline="always")
def _status(s):
    return (s >> 2) & 3


@nb.njit(inline="always")
def _snap(s, k):
    return (s >> (SH_SNAP + 2 * k)) & 3


# ------------------------------------------------------------------ additional epoch

@nb.njit(inline="always")
def join_additional(s, jf):
    """Restore the token held at the start of epoch max(jf-1, 0) and enter the additional epoch."""
    k = _get(s, SH_EPOCH, 6) - max(jf - 1, 0)
    if k < 0 or k > 2:
        return fail_state()
    # the snapshots are spent once the token is restored, so they are dropped
    return _snap(s, k) | F_ADD | (np.int64(jf) << SH_EPOCH)


@nb.njit(inline="always")
def _a_part(step, pv):
    if step < pv[I_AE1]:
        return 0
    if step < pv[I_AE2]:
        return 1
    if step < pv[I_AE3]:
        return 2
    if step < pv[I_AE4]:
        return 3
    return 4


@nb.njit(inline="always")
def _a_rollover(s, pv):
    tok = s & 3
    ph = _get(s, SH_APHASE, 6) + 1
    if ph >= pv[I_AMAX]:
        return fail_state()
    if tok != 0 and s & F_DOUBLED == 0:
        # done keeps its phase so the token keeps its value
        return _with_step(s | (tok << 2), 0)
    s = _set(s, SH_APHASE, 6, ph) & ~np.int64(F_DOUBLED)
    return _with_step(s, 0)


@nb.njit(inline="always")
def _a_advance(s, pv):
    st = _step(s) + 1
    if st >= pv[I_LA]:
        return _a_rollover(s, pv)
    return _with_step(s, st)


@nb.njit(inline="always")
def additional_delta(s1, s2, pv):
    """Both nodes normal and in the additional epoch: Majority-style rules."""
    if _get(s1, SH_EPOCH, 6) != _get(s2, SH_EPOCH, 6):
        return fail_state(), fail_state()
    ph1 = _get(s1, SH_APHASE, 6)
    ph2 = _get(s2, SH_APHASE, 6)
    p1 = _a_part(_step(s1), pv)
    p2 = _a_part(_step(s2), pv)
    d = (ph1 * 5 + p1) - (ph2 * 5 + p2)
    if d > 1 or d < -1:
        return fail_state(), fail_state()
    if ph1 != ph2:
        if ph1 < ph2:
            s1 = _a_rollover(s1, pv)
        else:
            s2 = _a_rollover(s2, pv)
        if _status(s1) != NORMAL or _status(s2) != NORMAL:
            return s1, s2
    elif p1 == p2:
        t1 = s1 & 3
        t2 = s2 & 3
        if p1 == 1:
            if t1 != 0 and t2 != 0 and t1 != t2:
                s1 = s1 & ~np.int64(3)
                s2 = s2 & ~np.int64(3)
        elif p1 == 3:
            if t1 != 0 and t2 == 0 and s1 & F_DOUBLED == 0:
                s1 = s1 | F_DOUBLED
                s2 = s2 | t1 | F_DOUBLED
            elif t2 != 0 and t1 == 0 and s2 & F_DOUBLED == 0:
                s2 = s2 | F_DOUBLED
                s1 = s1 | t2 | F_DOUBLED
    return _a_advance(s1, pv), _a_advance(s2, pv)


# ------------------------------------------------------------------ main epochs

@nb.njit(inline="always")
def epoch_rollover(s, pv):
    """End of the current epoch: next epoch, or the additional epoch on an unfinished token."""
    tok = s & 3
    age = _get(s, SH_AGE, 4)
    epoch = _get(s, SH_EPOCH, 6)
    if tok != 0 and age < pv[I_P]:
        return join_additional(s, epoch)
    epoch += 1
    if epoch >= pv[I_EMAX]:
        return fail_state()
    snaps = _get(s, SH_SNAP, 6)
    snaps = ((snaps << 2) & 63) | tok
    return tok | (epoch << SH_EPOCH) | (snaps << SH_SNAP)


@nb.njit(inline="always")
def advance(s, pv):
    """Increment epoch_step with phase-boundary and epoch-boundary bookkeeping."""
    st = _step(s) + 1
    if st >= pv[I_E]:
        return epoch_rollover(s, pv)
    if st <= pv[I_F] and st % pv[I_L] == 0:
        if s & F_OOS == 0 and s & 3 != 0 and s & F_DOUBLED == 0:
            s = s | F_OOS
        s = s & ~np.int64(F_DOUBLED)
    if s & F_OOS and st >= pv[I_F] and _get(s, SH_AGE, 4) == pv[I_P]:
        s = s & ~np.int64(F_OOS)
    return _with_step(s, st)


@nb.njit(inline="always")
def _time(s, pv):
    return _get(s, SH_EPOCH, 6) * pv[I_E] + _step(s)


@nb.njit(inline="always")
def _split(s, age, oos):
    s = _set(s, SH_AGE, 4, age)
    if oos:
        s = s | F_OOS
    return s


@nb.njit(inline="always")
def main_delta(s1, s2, pv):
    if abs(_time(s1, pv) - _time(s2, pv)) > pv[I_TAU]:
        return fail_state(), fail_state()
    e1 = _get(s1, SH_EPOCH, 6)
    e2 = _get(s2, SH_EPOCH, 6)
    if e1 != e2:
        if e1 < e2:
            s1 = epoch_rollover(s1, pv)
        else:
            s2 = epoch_rollover(s2, pv)
        if _status(s1) != NORMAL or _status(s2) != NORMAL or (s1 | s2) & F_ADD:
            return s1, s2
    else:
        t1 = s1 & 3
        t2 = s2 & 3
        st1 = _step(s1)
        st2 = _step(s2)
        F = pv[I_F]
        L = pv[I_L]
        oos1 = s1 & F_OOS
        oos2 = s2 & F_OOS
        if t1 != 0 and t2 != 0:
            # cancel: normal tokens, same phase, both in the canceling stage, equal age
            if (t1 != t2 and not oos1 and not oos2 and st1 < F and st2 < F
                    and st1 // L == st2 // L and st1 % L < pv[I_HALF] and st2 % L < pv[I_HALF]
                    and _get(s1, SH_AGE, 4) == _get(s2, SH_AGE, 4)):
                s1 = _set(s1 & ~np.int64(3), SH_AGE, 4, 0)
                s2 = _set(s2 & ~np.int64(3), SH_AGE, 4, 0)
        elif t1 != 0 or t2 != 0:
            if t1 != 0:
                a, b, sta, stb, ta = s1, s2, st1, st2, t1
            else:
                a, b, sta, stb, ta = s2, s1, st2, st1, t2
            age = _get(a, SH_AGE, 4)
            if a & F_OOS:
                if age < pv[I_P]:
                    a = _split(a, age + 1, True)
                    b = _split(b | ta, age + 1, True)
            elif (a & F_DOUBLED == 0 and sta < F and stb < F and sta // L == stb // L
                    and sta % L >= pv[I_HALF] and stb % L >= pv[I_HALF]):
                a = _split(a, age + 1, False) | F_DOUBLED
                b = _split(b | ta, age + 1, False) | F_DOUBLED
            if t1 != 0:
                s1, s2 = a, b
            else:
                s1, s2 = b, a
    return advance(s1, pv), advance(s2, pv)


# ------------------------------------------------------------------ delta

@nb.njit(inline="always")
def _done_meets(d, other):
    """A done(d) node meets a normal node: adopt done or fail both."""
    if other & F_ADD == 0:
        return fail_state(), False
    tok = other & 3
    if tok != 0 and tok != d:
        return fail_state(), False
    return _with_step((other & ~np.int64(12)) | (d << 2), 0), True


@nb.njit
def fm1_delta(s1, s2, pv):
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
    add1 = s1 & F_ADD
    add2 = s2 & F_ADD
    if add1 or add2:
        if not add1:
            s1 = join_additional(s1, _get(s2, SH_EPOCH, 6))
        elif not add2:
            s2 = join_additional(s2, _get(s1, SH_EPOCH, 6))
        if _status(s1) != NORMAL or _status(s2) != NORMAL:
            return fail_state(), fail_state()
        return additional_delta(s1, s2, pv)
    return main_delta(s1, s2, pv)


@nb.njit
def fm1_classify(s, pv):
    status = (s >> 2) & 3
    if status == FAIL:
        return status, -1, -1, 0, AUX_FAIL
    tok = s & 3
    add = s & F_ADD
    aux = 0
    if add:
        aux |= AUX_ADD
        age = max(_get(s, SH_EPOCH, 6) - 1, 0) * pv[I_P] + _get(s, SH_APHASE, 6) + ((s >> 4) & 1)
        epoch = -1
    else:
        age = _get(s, SH_EPOCH, 6) * pv[I_P] + _get(s, SH_AGE, 4)
        epoch = _get(s, SH_EPOCH, 6)
    if s & F_OOS:
        aux |= AUX_OOS
    value = 0
    if tok != 0:
        value = np.int64(1) << (pv[I_GMAX] - age)
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

def unpack(s: int, params: FM1Params):
    s = int(s)
    f = {
        "token": TOKEN_NAMES[s & 3],
        "status": ("normal", "done-A", "done-B", "fail")[(s >> 2) & 3],
        "doubled": bool(s & F_DOUBLED),
        "out_of_sync": bool(s & F_OOS),
        "additional_epoch": bool(s & F_ADD),
        "snapshots": tuple(TOKEN_NAMES[(s >> (SH_SNAP + 2 * k)) & 3] for k in range(3)),
        "epoch": (s >> SH_EPOCH) & 63,
        "step": s >> SH_STEP,
    }
    if f["additional_epoch"]:
        f["aphase"] = (s >> SH_APHASE) & 63
        f["age"] = f["aphase"] + int(f["doubled"]) if s & 3 else 0
        f["part"] = None
        f["phase"] = f["aphase"]
        f["phase_step"] = f["step"]
    else:
        f["age"] = (s >> SH_AGE) & 15
        if f["step"] < params.epoch_len:
            f["part"], f["phase"], f["phase_step"] = params.locate(f["step"])
        else:
            f["part"], f["phase"], f["phase_step"] = None, None, None
    return f


_FLAG_ORDER = (("d", F_DOUBLED), ("o", F_OOS), ("x", F_ADD))


def encode(s: int, params: FM1Params) -> str:
    s = int(s)
    f = unpack(s, params)
    flags = "".join(ch for ch, bit in _FLAG_ORDER if s & bit) + STATUS_SUFFIX[(s >> 2) & 3]
    snap = "".join(f["snapshots"])
    if f["additional_epoch"]:
        part, phase, step = "x", f["aphase"], f["step"]
    else:
        part = f["part"]
        phase = "-" if f["phase"] is None else f["phase"]
        step = f["phase_step"]
    return f"F1:{f['token']}:{f['epoch']}:{f['age']}:{part}:{phase}:{step}:{flags or '-'}:{snap}"


def decode(text: str, params: FM1Params) -> int:
    parts = text.split(":")
    if len(parts) != 9 or parts[0] != "F1":
        raise ValueError(f"not a FastMajority1 state encoding: {text!r}")
    _, tok, epoch, age, part, phase, step, flags, snap = parts
    if tok not in TOKEN_NAMES or len(snap) != 3 or any(ch not in TOKEN_NAMES for ch in snap):
        raise ValueError(f"bad token or snapshot field in {text!r}")
    s = TOKEN_NAMES.index(tok) | (int(epoch) << SH_EPOCH)
    for k, ch in enumerate(snap):
        s |= TOKEN_NAMES.index(ch) << (SH_SNAP + 2 * k)
    status = NORMAL
    if flags != "-":
        for suffix, code in ((v, k) for k, v in STATUS_SUFFIX.items() if v):
            if flags.endswith(suffix):
                status = code
                flags = flags[: -len(suffix)]
        for ch in flags:
            bit = dict(_FLAG_ORDER).get(ch)
            if bit is None:
                raise ValueError(f"bad flag {ch!r} in {text!r}")
            s |= bit
    s |= status << 2
    if part == "x":
        if not s & F_ADD:
            raise ValueError(f"part 'x' needs the x flag: {text!r}")
        s |= int(phase) << SH_APHASE
        s |= int(step) << SH_STEP
    else:
        s |= int(age) << SH_AGE
        if part == "1":
            est = params.first_part_len + int(step)
        else:
            est = int(phase) * params.phase_len + int(step)
        s |= est << SH_STEP
    return s


def pack_state(token=0, epoch=0, age=0, epoch_step=0, doubled=False, oos=False, status=NORMAL,
               snapshots=(0, 0, 0), additional=False, aphase=0) -> int:
    """Build a packed state from named fields (test and analysis helper)."""
    s = token | (status << 2) | (epoch << SH_EPOCH) | (epoch_step << SH_STEP)
    s |= (F_DOUBLED if doubled else 0) | (F_OOS if oos else 0) | (F_ADD if additional else 0)
    for k, v in enumerate(snapshots):
        s |= v << (SH_SNAP + 2 * k)
    if additional:
        s |= aphase << SH_APHASE
    else:
        s |= age << SH_AGE
    return s


def final_epoch_of(add_state: int) -> int:
    """j_f carried by an additional-epoch state."""
    return (int(add_state) >> SH_EPOCH) & 63


def fastmajority1_protocol(n: int, C: float = DEFAULT_C, c: Optional[float] = None,
                           add_C: Optional[float] = None, add_c: Optional[float] = None) -> ProtocolDefinition:
    params = FM1Params(n, C, c, add_C, add_c)

    def initial(instance):
        a = pack_state(token=1, snapshots=(1, 0, 0))
        b = pack_state(token=2, snapshots=(2, 0, 0))
        states = np.full(instance.n, b, dtype=np.int64)
        states[: instance.a0] = a
        return states

    proto = ProtocolDefinition(
        name="fastmajority1",
        n=n,
        params=params,
        pv=params.pv(),
        n_classes=4,
        n_epochs=params.E_max + 1,
        gmax=params.gmax,
        initial=initial,
        delta=fm1_delta,
        classify=fm1_classify,
        stable=_fast_stable,
        backup_only=_fast_stable,
        encode=lambda s: encode(s, params),
        decode=lambda t: decode(t, params),
        fields=lambda s: unpack(s, params),
        cmask=CMASK,
        horizon=(params.E_max * params.epoch_len + params.add_phases * params.add_phase_len) / 2,
    )
    proto.final_epoch_of = final_epoch_of
    return proto
