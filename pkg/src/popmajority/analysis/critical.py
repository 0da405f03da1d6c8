"""Critical phase of a majority instance and its place in the epoch geometry."""

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from popmajority.protocols.fastmajority1 import FM1Params


@dataclass(frozen=True)
class CriticalPhase:
    """``p_c`` plus the epoch and phase-in-epoch it falls on for FastMajority1."""

    p_c: int
    epoch: int
    phase_in_epoch: int
    phases_per_epoch: int

    def to_record(self) -> dict:
        return {
            "p_c": self.p_c,
            "epoch": self.epoch,
            "phase_in_epoch": self.phase_in_epoch,
            "phases_per_epoch": self.phases_per_epoch,
        }


def critical_phase(n: int, a0: int, b0: int, C: Optional[float] = None) -> CriticalPhase:
    """Smallest ``p >= 0`` with ``2**p * |a0 - b0| > n / 3``.

    Exact integer comparison (``3 * 2**p * gap > n``) avoids rounding at the
    boundary. Only the gap enters, so ``a0 + b0 = n`` is not enforced here
    (an odd gap at even ``n`` is still a meaningful query). The epoch
    placement uses FastMajority1's ``P`` phases per epoch; ``C`` does not
    change ``P`` and is accepted only for symmetry with the protocol
    constructors.
    """
    if a0 < 0 or b0 < 0 or n < 2:
        raise ValueError(f"need n >= 2 and non-negative counts, got n={n}, a0={a0}, b0={b0}")
    gap = abs(a0 - b0)
    if gap == 0:
        raise ValueError("a0 = b0 has no majority")
    p = 0
    while 3 * (gap << p) <= n:
        p += 1
    P = FM1Params(n, **({} if C is None else {"C": C})).P
    return CriticalPhase(p_c=p, epoch=p // P, phase_in_epoch=p % P, phases_per_epoch=P)


def imbalance(n: int, a0: int, b0: int) -> Fraction:
    """``|a0 - b0| / n`` as an exact fraction."""
    return Fraction(abs(a0 - b0), n)
