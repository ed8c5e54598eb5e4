"""Counter-based random streams.

Every trajectory ``i`` of a run with master seed ``seed`` owns the stream
``(seed, i)``; draw number ``c`` of that stream is a pure function of the
triple, so results never depend on how trajectories are scheduled.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numba import njit, uint64

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, nogil=True)
def mix64(z):
    z = uint64(z)
    z = (z ^ (z >> uint64(30))) * _M1
    z = (z ^ (z >> uint64(27))) * _M2
    return z ^ (z >> uint64(31))


@njit(cache=True, nogil=True)
def stream_key(seed, index):
    return mix64(mix64(uint64(seed) + _GOLDEN) ^ (uint64(index) * _GOLDEN + uint64(0x632BE59BD9B4E019)))


@njit(cache=True, nogil=True)
def uniform(key, counter):
    """Uniform draw in the open interval (0, 1)."""
    z = mix64(key + uint64(counter + 1) * _GOLDEN)
    return (float(z >> uint64(11)) + 0.5) * _INV53


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Numpy generator on an independent Philox stream."""
    return np.random.Generator(np.random.Philox(key=((seed & (2**64 - 1)) << 64) | (stream & (2**64 - 1))))
