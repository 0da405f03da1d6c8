"""Exact small-n reference values: epidemic completion and four-state absorption.

Nothing here calls the simulator's transition code. The four-state chain is
rebuilt from its own truth table so that simulation means can be checked
against an independent derivation.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations_with_replacement
from typing import Dict, List, Tuple

import numba as nb
import numpy as np

from popmajority import rng as _rng

ORACLE_MAX_N = 8


def harmonic(k: int) -> Fraction:
    return sum((Fraction(1, i) for i in range(1, k + 1)), Fraction(0))


def broadcast_expected(n: int) -> Fraction:
    """Exact mean interactions for one informed node to inform all ``n``: ``(n-1) H_{n-1}``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    return (n - 1) * harmonic(n - 1)


def broadcast_expected_by_stages(n: int) -> Fraction:
    """Same quantity summed stage by stage: ``sum_i C(n,2) / (i (n-i))``.

    With ``i`` informed nodes an interaction informs someone with
    probability ``i (n-i) / C(n,2)``; stage waits are geometric.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    pairs = Fraction(n * (n - 1), 2)
    return sum((pairs / (i * (n - i)) for i in range(1, n)), Fraction(0))


@nb.njit(cache=True)
def _broadcast_runs(n, states):
    runs = states.shape[0]
    out = np.empty(runs, np.int64)
    informed = np.zeros(n, np.bool_)
    for r in range(runs):
        rs = states[r]
        informed[:] = False
        informed[0] = True
        k = 1
        t = 0
        while k < n:
            i, j = _rng.ordered_pair(rs, n)
            t += 1
            if informed[i] != informed[j]:
                informed[i] = True
                informed[j] = True
                k += 1
        out[r] = t
    return out


def simulate_broadcast(n: int, runs: int, seed: int = 0) -> np.ndarray:
    """Completion interaction counts of ``runs`` single-source epidemics.

    Run ``r`` uses scheduler stream ``r`` of ``seed``; node 0 is the source.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    states = np.empty((runs, 4), np.uint64)
    for r in range(runs):
        states[r] = _rng.make_state(seed, r)
    return _broadcast_runs(n, states)


@dataclass
class BroadcastStats:
    n: int
    runs: int
    mean: float
    median: float
    p99: float
    maximum: int
    expected: Fraction
    within_3nlnn: float

    @property
    def relative_error(self) -> float:
        return self.mean / float(self.expected) - 1.0

    def to_record(self) -> dict:
        return {
            "n": self.n,
            "runs": self.runs,
            "mean": self.mean,
            "median": self.median,
            "p99": self.p99,
            "max": self.maximum,
            "expected": str(self.expected),
            "expected_decimal": float(self.expected),
            "relative_error": self.relative_error,
            "fraction_within_3nlnn": self.within_3nlnn,
        }


def broadcast_stats(n: int, runs: int, seed: int = 0) -> BroadcastStats:
    times = simulate_broadcast(n, runs, seed)
    bound = 3 * n * np.log(n)
    return BroadcastStats(
        n=n,
        runs=runs,
        mean=float(times.mean()),
        median=float(np.median(times)),
        p99=float(np.percentile(times, 99)),
        maximum=int(times.max()),
        expected=broadcast_expected(n),
        within_3nlnn=float(np.mean(times <= bound)),
    )


# ------------------------------------------------------------ four-state

# truth table on unordered pairs of {A, B, a, b}; absent pairs are no-ops
_FOUR_STATE_RULES: Dict[Tuple[str, str], Tuple[str, str]] = {
    ("A", "B"): ("a", "b"),
    ("A", "b"): ("A", "a"),
    ("B", "a"): ("B", "b"),
}
_KINDS = ("A", "B", "a", "b")

Counts = Tuple[int, int, int, int]


def _fire(p: str, q: str) -> Tuple[str, str]:
    if (p, q) in _FOUR_STATE_RULES:
        return _FOUR_STATE_RULES[(p, q)]
    if (q, p) in _FOUR_STATE_RULES:
        r = _FOUR_STATE_RULES[(q, p)]
        return r[1], r[0]
    return p, q


def _absorbed(c: Counts, n: int) -> bool:
    A, B, a, b = c
    return A + a == n or B + b == n


def _moves(c: Counts, n: int) -> List[Tuple[Counts, Fraction]]:
    """Successor count vectors with their exact probabilities (self-loops included)."""
    pairs = Fraction(n * (n - 1), 2)
    out: Dict[Counts, Fraction] = {}
    idx = {k: x for x, k in enumerate(_KINDS)}
    for p, q in combinations_with_replacement(_KINDS, 2):
        cp, cq = c[idx[p]], c[idx[q]]
        ways = cp * (cp - 1) // 2 if p == q else cp * cq
        if ways == 0:
            continue
        r1, r2 = _fire(p, q)
        nxt = list(c)
        for k in (p, q):
            nxt[idx[k]] -= 1
        for k in (r1, r2):
            nxt[idx[k]] += 1
        key = tuple(nxt)
        out[key] = out.get(key, Fraction(0)) + Fraction(ways) / pairs
    return list(out.items())


def _solve(matrix: List[List[Fraction]], rhs: List[Fraction]) -> List[Fraction]:
    """Gauss-Jordan elimination over the rationals."""
    m = len(rhs)
    a = [row[:] + [rhs[k]] for k, row in enumerate(matrix)]
    for col in range(m):
        piv = next((r for r in range(col, m) if a[r][col] != 0), None)
        if piv is None:
            raise ArithmeticError("singular absorption system")
        a[col], a[piv] = a[piv], a[col]
        inv = 1 / a[col][col]
        a[col] = [x * inv for x in a[col]]
        for r in range(m):
            if r != col and a[r][col] != 0:
                f = a[r][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[col])]
    return [a[r][m] for r in range(m)]


@dataclass
class MarkovOracleResult:
    """Exact expected interactions until every output agrees."""

    protocol: str
    n: int
    a0: int
    b0: int
    expected: Fraction
    absorbing: str
    transient_states: int
    expected_by_state: Dict[Counts, Fraction] = field(default_factory=dict, repr=False)

    def to_record(self, digits: int = 12) -> dict:
        return {
            "protocol": self.protocol,
            "n": self.n,
            "a0": self.a0,
            "b0": self.b0,
            "expected": str(self.expected),
            "expected_decimal": _decimal(self.expected, digits),
            "absorbing": self.absorbing,
            "transient_states": self.transient_states,
        }


def _decimal(x: Fraction, digits: int) -> str:
    """Fixed-point decimal string of ``x`` rounded half-up to ``digits`` places."""
    scaled = x * 10 ** digits
    q = (scaled.numerator * 2 + scaled.denominator) // (2 * scaled.denominator)
    sign = "-" if q < 0 else ""
    q = abs(q)
    return f"{sign}{q // 10 ** digits}.{q % 10 ** digits:0{digits}d}"


def four_state_markov_oracle(n: int, a0: int) -> MarkovOracleResult:
    """Solve the counts chain ``(#A, #B, #a, #b)`` for the expected absorption time.

    Absorbing configurations are those where all outputs agree. With
    ``a0 != b0`` the strong difference never vanishes, so absorption is
    certain and the linear system is non-singular.
    """
    if not 2 <= n <= ORACLE_MAX_N:
        raise ValueError(f"oracle supports 2 <= n <= {ORACLE_MAX_N}, got n={n}")
    b0 = n - a0
    if not 0 <= a0 <= n:
        raise ValueError("a0 must lie in [0, n]")
    if a0 == b0:
        raise ValueError("a0 = b0 has no majority and never absorbs")
    start: Counts = (a0, b0, 0, 0)
    absorbing = "all outputs A (#A + #a = n) or all outputs B (#B + #b = n)"
    if _absorbed(start, n):
        return MarkovOracleResult("fourstate", n, a0, b0, Fraction(0), absorbing, 0, {start: Fraction(0)})
    # reachable transient states
    order: List[Counts] = []
    seen = {start}
    stack = [start]
    while stack:
        c = stack.pop()
        if _absorbed(c, n):
            continue
        order.append(c)
        for d, _ in _moves(c, n):
            if d not in seen:
                seen.add(d)
                stack.append(d)
    order.sort()
    pos = {c: k for k, c in enumerate(order)}
    m = len(order)
    # (I - Q) x = 1
    matrix = [[Fraction(0)] * m for _ in range(m)]
    for c, k in pos.items():
        matrix[k][k] += 1
        for d, p in _moves(c, n):
            if d in pos:
                matrix[k][pos[d]] -= p
    x = _solve(matrix, [Fraction(1)] * m)
    by_state = {c: x[k] for c, k in pos.items()}
    return MarkovOracleResult("fourstate", n, a0, b0, by_state[start], absorbing, m, by_state)
