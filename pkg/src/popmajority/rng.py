"""xoshiro256** generator usable from numba kernels.

Stream rule (stable across versions): the 256-bit state for ``(seed, stream)``
is ``SeedSequence(entropy=seed, spawn_key=(stream,)).generate_state(4, uint64)``,
i.e. numpy's own hash-based stream splitting, so per-run streams are
independent and cost O(1) to derive. ``jump()`` is kept for callers that want
provably disjoint substreams of one state.
"""

import numba as nb
import numpy as np
from numba import uint64

RNG_VERSION = "xoshiro256starstar-1"

_JUMP = np.array(
    [0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C],
    dtype=np.uint64,
)
_MASK32 = uint64(0xFFFFFFFF)


@nb.njit(inline="always")
def _rotl(x, k):
    return (x << uint64(k)) | (x >> uint64(64 - k))


@nb.njit(inline="always")
def next_u64(s):
    result = _rotl(s[1] * uint64(5), 7) * uint64(9)
    t = s[1] << uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@nb.njit(inline="always")
def bounded(s, n):
    """Uniform integer in [0, n) for 0 < n < 2**32 (Lemire, with rejection)."""
    nn = uint64(n)
    while True:
        x = next_u64(s) >> uint64(32)
        m = x * nn
        low = m & _MASK32
        if low >= nn:
            return np.int64(m >> uint64(32))
        if low >= (uint64(0x100000000) - nn) % nn:
            return np.int64(m >> uint64(32))


@nb.njit(inline="always")
def uniform(s):
    """Uniform double in [0, 1) with 53 random bits."""
    return np.float64(next_u64(s) >> uint64(11)) * (1.0 / 9007199254740992.0)


@nb.njit(inline="always")
def ordered_pair(s, n):
    """Uniform ordered pair of distinct indices in [0, n), n < 2**32.

    Both indices come from the two 32-bit halves of one output (Lemire's
    multiply-shift on each half); a fresh output is drawn if either half
    falls in its rejection zone.
    """
    nn = uint64(n)
    mm = uint64(n - 1)
    lim_n = (uint64(0x100000000) - nn) % nn
    lim_m = (uint64(0x100000000) - mm) % mm
    while True:
        x = next_u64(s)
        a = (x >> uint64(32)) * nn
        b = (x & _MASK32) * mm
        if (a & _MASK32) < lim_n or (b & _MASK32) < lim_m:
            continue
        i = np.int64(a >> uint64(32))
        j = np.int64(b >> uint64(32))
        if j >= i:
            j += 1
        return i, j


@nb.njit(cache=True)
def jump(s):
    s0 = uint64(0)
    s1 = uint64(0)
    s2 = uint64(0)
    s3 = uint64(0)
    for k in range(4):
        word = _JUMP[k]
        for b in range(64):
            if (word >> uint64(b)) & uint64(1):
                s0 ^= s[0]
                s1 ^= s[1]
                s2 ^= s[2]
                s3 ^= s[3]
            next_u64(s)
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3


@nb.njit(cache=True)
def draw_pairs(s, n, count):
    out = np.empty((count, 2), dtype=np.int64)
    for k in range(count):
        i, j = ordered_pair(s, n)
        out[k, 0] = i
        out[k, 1] = j
    return out


def make_state(seed: int, stream: int = 0) -> np.ndarray:
    """Fresh generator state for stream ``stream`` of ``seed``."""
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if stream < 0:
        raise ValueError("stream must be non-negative")
    state = np.random.SeedSequence(entropy=seed, spawn_key=(stream,)).generate_state(4, np.uint64)
    if not state.any():
        state[0] = 1
    return state
