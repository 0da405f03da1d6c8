"""Protocol abstraction and the fast+backup product construction.

Agent states are packed into ``int64`` values so that transition functions can
run inside compiled kernels. Bits 0-1 of every extended state hold the
four-state backup component (``A=0, B=1, a=2, b=3``); the fast component lives
in the remaining bits. Opinions are coded ``A=0, B=1``.

Each protocol supplies compiled functions with these shapes:

``delta(s1, s2, pv) -> (s1', s2')``
    ordered transition; ``pv`` is the protocol's int64 parameter vector.
``classify(s, pv) -> (klass, out, epoch, value, aux)``
    ``klass`` indexes the stability counters, ``out`` is the output opinion,
    ``epoch`` is the epoch index or -1, ``value`` the signed token value scaled
    by ``2**gmax`` and ``aux`` a bit set of the ``AUX_*`` flags below.
``stable(counts, n) -> bool`` and ``backup_only(counts, n) -> bool``
    predicates over the per-class counters.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional

import numba as nb
import numpy as np

A, B = 0, 1
OPINION_NAMES = "AB"

AUX_FAIL = 1
AUX_OOS = 2
AUX_ADD = 4
AUX_DONE = 8
# node carries no token value and never joins the additional epoch (clocks)
AUX_NEUTRAL = 16

# fast-component status codes shared by the three fast protocols
NORMAL, DONE_A, DONE_B, FAIL = 0, 1, 2, 3
STATUS_SUFFIX = {NORMAL: "", DONE_A: "!A", DONE_B: "!B", FAIL: "!F"}

# four-state backup codes
FS_A, FS_B, FS_a, FS_b = 0, 1, 2, 3
FOUR_STATE_NAMES = "ABab"


@nb.njit(inline="always")
def four_state_delta(p, q):
    """(A,B)->(a,b), (A,b)->(A,a), (B,a)->(B,b) plus the mirrored orders."""
    if p == FS_A:
        if q == FS_B:
            return FS_a, FS_b
        if q == FS_b:
            return FS_A, FS_a
    elif p == FS_B:
        if q == FS_A:
            return FS_b, FS_a
        if q == FS_a:
            return FS_B, FS_b
    elif p == FS_b:
        if q == FS_A:
            return FS_a, FS_A
    elif p == FS_a:
        if q == FS_B:
            return FS_b, FS_B
    return p, q


@nb.njit(inline="always")
def four_state_output(p):
    return p & 1


@dataclass
class ProtocolDefinition:
    """A protocol instantiated for a fixed population size ``n``."""

    name: str
    n: int
    params: Any
    pv: np.ndarray
    n_classes: int
    n_epochs: int
    gmax: int
    initial: Callable[[Any], np.ndarray]
    delta: Any
    classify: Any
    stable: Any
    backup_only: Any
    encode: Callable[[int], str]
    decode: Callable[[str], int]
    fields: Callable[[int], Dict[str, Any]]
    extended: bool = False
    is_asymmetric: Callable[[int, int], bool] = field(default=lambda s1, s2: False)
    fast: Optional["ProtocolDefinition"] = None
    # bits of a state that can influence ``classify``; interactions touching
    # no such bit skip the bookkeeping in the kernel
    cmask: int = -1
    # parallel time by which the fast component has certainly stopped (done,
    # fail or clock exhaustion); None for the backup on its own
    horizon: Optional[float] = None

    @property
    def pv_tuple(self):
        """``pv`` as a tuple of ints; kernels take this form to avoid refcounting."""
        return tuple(np.int64(x) for x in self.pv)

    def transition(self, s1: int, s2: int):
        a, b = self.delta(np.int64(s1), np.int64(s2), self.pv_tuple)
        return int(a), int(b)

    def output(self, s: int) -> int:
        return int(self.classify(np.int64(s), self.pv_tuple)[1])

    def expected_sum(self, a0: int, b0: int) -> int:
        return (a0 - b0) << self.gmax


# ---------------------------------------------------------------- four-state

@nb.njit
def _fs_delta(s1, s2, pv):
    return four_state_delta(s1 & 3, s2 & 3)


@nb.njit
def _fs_classify(s, pv):
    k = s & 3
    value = 1 if k == FS_A else (-1 if k == FS_B else 0)
    return k, k & 1, -1, value, 0


@nb.njit
def _fs_stable(counts, n):
    # with no strong token left no rule can fire (unreachable from valid inputs)
    if counts[FS_A] + counts[FS_B] == 0:
        return True
    return counts[FS_A] + counts[FS_a] == n or counts[FS_B] + counts[FS_b] == n


@nb.njit
def _always(counts, n):
    return True


def _fs_initial(instance):
    states = np.full(instance.n, FS_B, dtype=np.int64)
    states[: instance.a0] = FS_A
    return states


def encode_four_state(s: int) -> str:
    return FOUR_STATE_NAMES[int(s) & 3]


def decode_four_state(text: str) -> int:
    try:
        return FOUR_STATE_NAMES.index(text)
    except ValueError:
        raise ValueError(f"not a four-state encoding: {text!r}") from None


def four_state_protocol(n: int) -> ProtocolDefinition:
    """The always-correct four-state protocol run on its own."""
    return ProtocolDefinition(
        name="fourstate",
        n=n,
        params=None,
        pv=np.zeros(1, dtype=np.int64),
        n_classes=4,
        n_epochs=1,
        gmax=0,
        initial=_fs_initial,
        delta=_fs_delta,
        classify=_fs_classify,
        stable=_fs_stable,
        backup_only=_always,
        encode=encode_four_state,
        decode=decode_four_state,
        fields=lambda s: {
            "token": FOUR_STATE_NAMES[int(s) & 3] if int(s) & 3 < 2 else "-",
            "age": 0,
            "status": "normal",
            "epoch": 0,
            "step": 0,
        },
    )


def four_state_stable(states) -> bool:
    """True iff all outputs agree (all in {A,a} or all in {B,b}).

    A configuration without strong tokens is also reported stable: no rule
    can fire in it. Such configurations are unreachable from valid inputs,
    where the strong difference ``#A - #B = a0 - b0`` never vanishes.
    """
    codes = np.asarray(states, dtype=np.int64) & 3
    if not np.any(codes < 2):
        return True
    return len({int(s) & 1 for s in codes}) <= 1


# ---------------------------------------------------------------- broadcast

INFORMED, UNINFORMED = 1, 0


def broadcast_delta(p: int, q: int):
    if p == INFORMED or q == INFORMED:
        return INFORMED, INFORMED
    return p, q


# ---------------------------------------------------------------- extended

@nb.njit
def _ext_stable(counts, n):
    done_a = counts[4] + counts[5] + counts[6] + counts[7]
    if done_a == n:
        return True
    done_b = counts[8] + counts[9] + counts[10] + counts[11]
    if done_b == n:
        return True
    fail = counts[12] + counts[13] + counts[14] + counts[15]
    if fail == n:
        return counts[12] + counts[14] == n or counts[13] + counts[15] == n
    return False


@nb.njit
def _ext_backup_only(counts, n):
    return counts[12] + counts[13] + counts[14] + counts[15] == n


_EXT_CACHE: Dict[Any, Any] = {}


def _extended_functions(fast_delta, fast_classify):
    key = (fast_delta, fast_classify)
    if key in _EXT_CACHE:
        return _EXT_CACHE[key]

    @nb.njit
    def delta(s1, s2, pv):
        f1, f2 = fast_delta(s1 >> 2, s2 >> 2, pv)
        b1, b2 = four_state_delta(s1 & 3, s2 & 3)
        return (f1 << 2) | b1, (f2 << 2) | b2

    @nb.njit
    def classify(s, pv):
        status, out, epoch, value, aux = fast_classify(s >> 2, pv)
        if out < 0:
            out = s & 1
        return status * 4 + (s & 3), out, epoch, value, aux

    _EXT_CACHE[key] = (delta, classify)
    return delta, classify


def compose_extended(fast: ProtocolDefinition) -> ProtocolDefinition:
    """Run ``fast`` and the four-state backup side by side on every interaction.

    A done node outputs its fast opinion, a fail node outputs its backup
    output, and any other node uses the fast output when it has one and the
    backup output otherwise. The product is stable when every node is done
    with one opinion, or every node failed and the backup is unanimous.
    """
    delta, classify = _extended_functions(fast.delta, fast.classify)

    def initial(instance):
        backup = _fs_initial(instance)
        return (fast.initial(instance) << 2) | backup

    def encode(s):
        s = int(s)
        return f"{fast.encode(s >> 2)}/{FOUR_STATE_NAMES[s & 3]}"

    def decode(text):
        head, _, tail = text.rpartition("/")
        if not head:
            raise ValueError(f"extended state needs a '/<backup>' suffix: {text!r}")
        return (fast.decode(head) << 2) | decode_four_state(tail)

    def fields(s):
        out = dict(fast.fields(int(s) >> 2))
        out["backup"] = FOUR_STATE_NAMES[int(s) & 3]
        return out

    return ProtocolDefinition(
        name=fast.name,
        n=fast.n,
        params=fast.params,
        pv=fast.pv,
        n_classes=16,
        n_epochs=fast.n_epochs,
        gmax=fast.gmax,
        initial=initial,
        delta=delta,
        classify=classify,
        stable=_ext_stable,
        backup_only=_ext_backup_only,
        encode=encode,
        decode=decode,
        fields=fields,
        extended=True,
        is_asymmetric=lambda s1, s2: fast.is_asymmetric(int(s1) >> 2, int(s2) >> 2),
        fast=fast,
        cmask=-1 if fast.cmask == -1 else (fast.cmask << 2) | 3,
        horizon=fast.horizon,
    )


def output_of(protocol: ProtocolDefinition, s: int) -> str:
    """Output opinion ``'A'`` or ``'B'`` of a single state."""
    return OPINION_NAMES[protocol.output(s)]
