"""SplitMix64 hashing and bit-rotation row indexing.

All hashing in the package routes through these functions so that ids,
feature seeds and cache records are bit-identical across platforms and
across the compiled/fallback kernel backends. Scalar versions use plain
Python integers (exact 64-bit wraparound via masking); batch versions
dispatch to the kernel backend.
"""
from __future__ import annotations

import numpy as np

from . import _kernels

_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(x: int) -> int:
    """One application of the SplitMix64 finalizer to a 64-bit state."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def string_seed(name: str) -> int:
    """Fold a feature/layer name into a 64-bit seed.

    h starts at 0 and absorbs one UTF-8 byte per round: h = splitmix64(h ^ byte).
    """
    h = 0
    for byte in name.encode("utf-8"):
        h = splitmix64(h ^ byte)
    return h


def hash_id(v: int, feature_seed: int) -> int:
    """Hash an id under a feature seed: splitmix64(v ^ splitmix64(seed))."""
    return splitmix64((v ^ splitmix64(feature_seed)) & _MASK64)


def rotl64(z: int, i: int) -> int:
    """Rotate a 64-bit pattern left by i bits (i = 0 is the identity)."""
    if i == 0:
        return z & _MASK64
    return ((z << i) | (z >> (64 - i))) & _MASK64


def row_indices(z: int, k: int, n_rows: int) -> list[int]:
    """k probe rows for hashed id z: rotate-left by i, then modulo n_rows."""
    if not 1 <= k <= 63:
        raise ValueError(f"k must be in [1, 63], got {k}")
    if n_rows < 1:
        raise ValueError(f"n_rows must be >= 1, got {n_rows}")
    return [rotl64(z, i) % n_rows for i in range(k)]


def splitmix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 over a uint64 array."""
    return _kernels.splitmix64_array(np.ascontiguousarray(x, dtype=np.uint64))


def hash_ids(values: np.ndarray, feature_seed: int) -> np.ndarray:
    """Vectorized hash_id over an int array; returns uint64 patterns."""
    v = np.ascontiguousarray(values, dtype=np.uint64)
    return _kernels.hash_ids(v, feature_seed & _MASK64)


def row_indices_batch(z: np.ndarray, k: int, n_rows: int) -> np.ndarray:
    """Vectorized row_indices: (N,) uint64 patterns -> (N, k) int64 indices."""
    if not 1 <= k <= 63:
        raise ValueError(f"k must be in [1, 63], got {k}")
    if n_rows < 1:
        raise ValueError(f"n_rows must be >= 1, got {n_rows}")
    z = np.ascontiguousarray(z, dtype=np.uint64)
    return _kernels.row_indices_batch(z, k, n_rows)
