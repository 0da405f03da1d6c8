"""Logarithmic-phase canceling/doubling majority with jump-up synchronization.

Packed fast-component layout (an ``int64``)::

    bits 0-1   token     0 empty, 1 A, 2 B
    bits 2-3   status    NORMAL, DONE_A, DONE_B, FAIL
    bit  4     doubled
    bits 5-10  phase
    bits 11-   phase_step

Parameter vector ``pv``: ``[phase_len, end_b1, end_cancel, end_b2, end_double,
max_phase, gmax, lam]`` where ``end_*`` are exclusive part boundaries.
"""

from dataclasses import dataclass
import math
import warnings

import numba as nb
import numpy as np

from popmajority.protocols.base import (
    AUX_DONE,
    AUX_FAIL,
    DONE_A,
    DONE_B,
    FAIL,
    NORMAL,
    STATUS_SUFFIX,
    ProtocolDefinition,
)

TOKEN_NONE, TOKEN_A, TOKEN_B = 0, 1, 2
TOKEN_NAMES = "-AB"

BUFFER1, CANCELING, BUFFER2, DOUBLING, BUFFER3 = range(5)
PART_NAMES = ("buffer1", "canceling", "buffer2", "doubling", "buffer3")

# packed-field helpers shared with the other fast protocols
PHASE_SHIFT = 5
STEP_SHIFT = 11

DEFAULT_C = 160
DEFAULT_C_SMALL = 32


def lam_of(n: int) -> int:
    return max(1, math.ceil(math.log2(n)))


@dataclass(frozen=True)
class MajorityParams:
    n: int
    C: float = DEFAULT_C
    c: float = DEFAULT_C_SMALL

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not self.C > 3 * self.c > 0:
            raise ValueError(f"need C > 3c > 0 so that canceling and doubling stages exist (C={self.C}, c={self.c})")
        if self.c > self.C / 9:
            warnings.warn(f"c={self.c} exceeds C/9={self.C / 9:.3g}; fine for simulation, outside the analysed regime",
                          stacklevel=3)
        if self.part_lengths[1] < 1:
            raise ValueError("canceling stage would be empty; increase C or decrease c")

    @property
    def lam(self) -> int:
        return lam_of(self.n)

    @property
    def phase_len(self) -> int:
        return int(math.floor(self.C * self.lam))

    @property
    def part_lengths(self):
        lam = self.lam
        buf = int(math.floor(self.c * lam))
        stage = int(math.floor((self.C - 3 * self.c) / 2 * lam))
        return (buf, stage, buf, stage, self.phase_len - 2 * buf - 2 * stage)

    @property
    def max_phase(self) -> int:
        return self.lam + 2

    @property
    def gmax(self) -> int:
        return self.lam + 3

    def part_of(self, step: int) -> int:
        if not 0 <= step < self.phase_len:
            raise ValueError(f"step {step} outside [0, {self.phase_len})")
        acc = 0
        for k, length in enumerate(self.part_lengths):
            acc += length
            if step < acc:
                return k
        return BUFFER3

    def pv(self) -> np.ndarray:
        ends = np.cumsum(self.part_lengths[:4])
        return np.array([self.phase_len, *ends, self.max_phase, self.gmax, self.lam], dtype=np.int64)


# ------------------------------------------------------------------ packing

@nb.njit(inline="always")
def pack(token, status, doubled, phase, step):
    return token | (status << 2) | (doubled << 4) | (phase << PHASE_SHIFT) | (step << STEP_SHIFT)


@nb.njit(inline="always")
def unpack(s):
    return s & 3, (s >> 2) & 3, (s >> 4) & 1, (s >> PHASE_SHIFT) & 63, s >> STEP_SHIFT


@nb.njit(inline="always")
def part_index(step, pv):
    if step < pv[1]:
        return 0
    if step < pv[2]:
        return 1
    if step < pv[3]:
        return 2
    if step < pv[4]:
        return 3
    return 4


@nb.njit(inline="always")
def fail_state():
    return FAIL << 2


@nb.njit(inline="always")
def propagate(s1, s2):
    """Done/fail spreading. Returns (s1', s2', handled)."""
    st1 = (s1 >> 2) & 3
    st2 = (s2 >> 2) & 3
    if st1 == NORMAL and st2 == NORMAL:
        return s1, s2, False
    if st1 == FAIL or st2 == FAIL:
        return fail_state(), fail_state(), True
    if st1 != NORMAL and st2 != NORMAL:
        if st1 == st2:
            return s1, s2, True
        return fail_state(), fail_state(), True
    # exactly one done node; the other is normal
    if st1 != NORMAL:
        d, other, first = st1, s2, True
    else:
        d, other, first = st2, s1, False
    tok = other & 3
    if tok != 0 and tok != d:
        return fail_state(), fail_state(), True
    other = (other & ~np.int64(12)) | (d << 2)
    if first:
        return s1, other, True
    return other, s2, True


@nb.njit(inline="always")
def rollover(s, pv):
    """Start the next phase at step 0: done on an undoubled token, fail past the last phase."""
    tok = s & 3
    doubled = (s >> 4) & 1
    phase = ((s >> PHASE_SHIFT) & 63) + 1
    if phase >= pv[5]:
        return fail_state()
    if tok != 0 and doubled == 0:
        # done keeps the phase it failed in, so the token keeps its value
        return pack(tok, tok, 0, phase - 1, 0)  # TOKEN_A -> DONE_A, TOKEN_B -> DONE_B
    return pack(tok, NORMAL, 0, phase, 0)


@nb.njit(inline="always")
def advance(s, pv):
    step = (s >> STEP_SHIFT) + 1
    if step >= pv[0]:
        return rollover(s, pv)
    return (s & ((np.int64(1) << STEP_SHIFT) - 1)) | (step << STEP_SHIFT)


@nb.njit
def majority_delta(s1, s2, pv):
    s1, s2, handled = propagate(s1, s2)
    if handled:
        return s1, s2
    ph1 = (s1 >> PHASE_SHIFT) & 63
    ph2 = (s2 >> PHASE_SHIFT) & 63
    p1 = part_index(s1 >> STEP_SHIFT, pv)
    p2 = part_index(s2 >> STEP_SHIFT, pv)
    d = (ph1 * 5 + p1) - (ph2 * 5 + p2)
    if d > 1 or d < -1:
        return fail_state(), fail_state()
    if ph1 != ph2:
        if ph1 < ph2:
            s1 = rollover(s1, pv)
        else:
            s2 = rollover(s2, pv)
        if (s1 >> 2) & 3 != NORMAL or (s2 >> 2) & 3 != NORMAL:
            return s1, s2
        ph1 = ph2 = max(ph1, ph2)
        p1 = p2 = 0
    elif p1 == p2:
        t1 = s1 & 3
        t2 = s2 & 3
        if p1 == CANCELING:
            if t1 != 0 and t2 != 0 and t1 != t2:
                s1 = s1 & ~np.int64(3)
                s2 = s2 & ~np.int64(3)
        elif p1 == DOUBLING:
            if t1 != 0 and t2 == 0 and (s1 >> 4) & 1 == 0:
                s1 = s1 | 16
                s2 = s2 | t1 | 16
            elif t2 != 0 and t1 == 0 and (s2 >> 4) & 1 == 0:
                s2 = s2 | 16
                s1 = s1 | t2 | 16
    return advance(s1, pv), advance(s2, pv)


@nb.njit
def majority_classify(s, pv):
    tok = s & 3
    status = (s >> 2) & 3
    phase = (s >> PHASE_SHIFT) & 63
    aux = 0
    value = 0
    if status == FAIL:
        return status, -1, -1, 0, AUX_FAIL
    if tok != 0:
        age = phase + ((s >> 4) & 1)
        value = np.int64(1) << (pv[6] - age)
        if tok == TOKEN_B:
            value = -value
    if status != NORMAL:
        aux = AUX_DONE
        return status, status - 1, -1, value, aux
    out = tok - 1 if tok != 0 else -1
    return status, out, phase, value, aux


# ------------------------------------------------------------------ text

def encode(s: int) -> str:
    tok, status, doubled, phase, step = (int(x) for x in unpack(np.int64(s)))
    flags = ("d" if doubled else "") + STATUS_SUFFIX[status]
    return f"M:{TOKEN_NAMES[tok]}:{phase}:{step}:{flags or '-'}"


def decode(text: str) -> int:
    parts = text.split(":")
    if len(parts) != 5 or parts[0] != "M":
        raise ValueError(f"not a majority state encoding: {text!r}")
    _, tok, phase, step, flags = parts
    if tok not in TOKEN_NAMES:
        raise ValueError(f"bad token {tok!r}")
    doubled = 0
    status = NORMAL
    if flags != "-":
        if flags.startswith("d"):
            doubled = 1
            flags = flags[1:]
        lookup = {v: k for k, v in STATUS_SUFFIX.items() if v}
        if flags:
            if flags not in lookup:
                raise ValueError(f"bad flags in {text!r}")
            status = lookup[flags]
    return int(pack(TOKEN_NAMES.index(tok), status, doubled, int(phase), int(step)))


def fields(s: int, params: MajorityParams):
    tok, status, doubled, phase, step = (int(x) for x in unpack(np.int64(s)))
    return {
        "token": TOKEN_NAMES[tok],
        "age": phase + doubled if tok else 0,
        "status": ("normal", "done-A", "done-B", "fail")[status],
        "epoch": phase,
        "step": step,
        "phase": phase,
        "part": PART_NAMES[params.part_of(step)] if step < params.phase_len else None,
        "doubled": bool(doubled),
    }


@nb.njit
def _fast_stable(counts, n):
    return counts[DONE_A] == n or counts[DONE_B] == n or counts[FAIL] == n


def majority_protocol(n: int, C: float = DEFAULT_C, c: float = DEFAULT_C_SMALL) -> ProtocolDefinition:
    """The fast component on its own (no backup); see :func:`compose_extended`."""
    params = MajorityParams(n, C, c)

    def initial(instance):
        states = np.full(instance.n, pack(TOKEN_B, NORMAL, 0, 0, 0), dtype=np.int64)
        states[: instance.a0] = pack(TOKEN_A, NORMAL, 0, 0, 0)
        return states

    return ProtocolDefinition(
        name="majority",
        n=n,
        params=params,
        pv=params.pv(),
        n_classes=4,
        n_epochs=params.max_phase + 1,
        gmax=params.gmax,
        initial=initial,
        delta=majority_delta,
        classify=majority_classify,
        stable=_fast_stable,
        backup_only=_fast_stable,
        encode=encode,
        decode=decode,
        fields=lambda s: fields(s, params),
        cmask=(1 << STEP_SHIFT) - 1,
        # every node takes about two steps per unit of parallel time
        horizon=params.max_phase * params.phase_len / 2,
    )
