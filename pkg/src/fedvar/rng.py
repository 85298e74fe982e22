"""Counter-based random draws addressed by (seed, trial, round, agent, step, lane).

Every draw is a pure function of its coordinates, so results do not depend on
evaluation order, batching or the number of worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S63 = np.uint64(63)
_TWO_53 = 2.0**-53


def _mix(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _as_u64(v) -> np.ndarray:
    if isinstance(v, (int, np.integer)):
        return np.uint64(int(v) & 0xFFFFFFFFFFFFFFFF)
    return np.asarray(v).astype(np.uint64)


_SALTS = [np.uint64((k + 2) * 0x632BE59BD9B4E019 & 0xFFFFFFFFFFFFFFFF) for k in range(16)]


@dataclass(frozen=True)
class Prefix:
    """Hash state after the first ``depth`` coordinates (seed included).

    Passing a prefix in place of the seed continues the hash, so
    ``counter_hash(prefix(s, a), b) == counter_hash(s, a, b)``. Loops that vary
    only the last coordinates use this to skip the shared work.
    """

    h: np.ndarray
    depth: int

    def __getitem__(self, idx) -> "Prefix":
        return Prefix(self.h[idx], self.depth)


def counter_hash(seed, *coords) -> np.ndarray:
    """Hash a seed and integer coordinates to 64 random bits (broadcasting)."""
    if isinstance(seed, Prefix):
        h, start = seed.h, seed.depth
    else:
        h, start = None, 0
    # integer arrays wrap silently; only a 0-d hash state needs the overflow guard
    if np.ndim(seed if h is None else h) == 0:
        with np.errstate(over="ignore"):
            return np.asarray(_hash(seed, h, start, coords))
    return _hash(seed, h, start, coords)


def _hash(seed, h, start, coords):
    if h is None:
        h = _mix(np.asarray(_as_u64(seed)) ^ _GOLDEN)
    for k, c in enumerate(coords, start):
        h = _mix(h ^ (_as_u64(c) + _SALTS[k]))
    return h


def prefix(seed, *coords) -> Prefix:
    """Hash state for ``seed`` followed by ``coords``; see :class:`Prefix`."""
    depth = len(coords) + (seed.depth if isinstance(seed, Prefix) else 0)
    return Prefix(counter_hash(seed, *coords), depth)


def uniform(seed, *coords) -> np.ndarray:
    """Uniform doubles on [0, 1) with 53 bits of resolution."""
    return (counter_hash(seed, *coords) >> np.uint64(11)).astype(np.float64) * _TWO_53


def fair_bit(seed, *coords) -> np.ndarray:
    """One fair Bernoulli bit per coordinate tuple (0 or 1 as int8)."""
    h = seed.h if isinstance(seed, Prefix) and not coords else counter_hash(seed, *coords)
    return (h >> _S63).astype(np.int8)


def standard_normal(seed, *coords) -> np.ndarray:
    """Box-Muller normal draws; lanes 0 and 1 are reserved under the given coordinates."""
    u1 = uniform(seed, *coords, 0)
    u2 = uniform(seed, *coords, 1)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def derive_seed(base_seed: int, index: int) -> int:
    """Child seed for trial ``index``; stays in the unsigned 64-bit range."""
    return int(counter_hash(base_seed, index, 0x7431A1))
