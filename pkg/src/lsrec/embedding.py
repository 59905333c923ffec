"""Embedding backends: dense per-id table and the k-shift hashed table.

The k-shift table hashes an id to a 64-bit pattern, derives k row indices by
bit rotations modulo the row count, and returns the L2-normalized sum of the
probed rows. Its storage is rows x dim regardless of vocabulary size, which
is the whole point for million-scale vocabularies.

Both backends expose the same surface: `forward(ids) -> (vectors, cache)` and
`backward(cache, upstream) -> table gradient`, plus `values` as the single
trainable tensor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .hashing import hash_ids, row_indices_batch, string_seed


def _init_table(rows: int, dim: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=(rows, dim)).astype(dtype)


class DenseTable:
    """Plain per-id embedding rows; lookups are not normalized."""

    def __init__(self, rows: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        self.rows = rows
        self.dim = dim
        self.values = _init_table(rows, dim, rng, dtype)

    @property
    def n_params(self) -> int:
        return self.values.size

    def forward(self, ids: np.ndarray):
        flat = np.ascontiguousarray(ids.reshape(-1), dtype=np.int64)
        return self.values[flat], flat

    def backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        flat = cache
        grad = np.zeros_like(self.values)
        up = np.ascontiguousarray(upstream.reshape(len(flat), self.dim), dtype=self.values.dtype)
        _kernels.scatter_add(grad, flat, up)
        return grad


class KShiftTable:
    """Shared table addressed by k bit-rotated hash probes, summed and
    L2-normalized with a guarded denominator max(||e||, epsilon)."""

    def __init__(self, rows: int, dim: int, k: int, rng: np.random.Generator,
                 dtype=np.float64, feature_name: str = "item", epsilon: float = 1e-12):
        if rows < 1:
            raise ValueError(f"rows must be >= 1, got {rows}")
        if not 1 <= k <= 63:
            raise ValueError(f"k must be in [1, 63], got {k}")
        self.rows = rows
        self.dim = dim
        self.k = k
        self.feature_seed = string_seed(feature_name)
        self.epsilon = epsilon
        self.values = _init_table(rows, dim, rng, dtype)

    @property
    def n_params(self) -> int:
        return self.values.size

    def probe_indices(self, ids: np.ndarray) -> np.ndarray:
        z = hash_ids(ids.reshape(-1), self.feature_seed)
        return row_indices_batch(z, self.k, self.rows)

    def forward(self, ids: np.ndarray):
        idx = self.probe_indices(ids)
        s = _kernels.gather_sum(self.values, idx)
        norms = np.sqrt((s.astype(np.float64) ** 2).sum(axis=1))
        denom = np.maximum(norms, self.epsilon).astype(self.values.dtype)
        out = s / denom[:, None]
        return out, (idx, out, denom, norms)

    def backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        idx, out, denom, norms = cache
        up = upstream.reshape(out.shape)
        # d(s / max(||s||, eps)): full normalization Jacobian above the guard,
        # constant 1/eps below it
        radial = (out * up).sum(axis=1, keepdims=True)
        g_s = (up - out * radial) / denom[:, None]
        degenerate = norms < self.epsilon
        if degenerate.any():
            g_s[degenerate] = up[degenerate] / self.epsilon
        grad = np.zeros_like(self.values)
        _kernels.scatter_add_multi(grad, idx, np.ascontiguousarray(g_s, dtype=self.values.dtype))
        return grad


@dataclass
class CollisionStats:
    full_collision_pairs: int
    probe0_load_histogram: dict[int, int]


def collision_stats(ids: np.ndarray, k: int, rows: int, feature_seed: int) -> CollisionStats:
    """Diagnostics for a candidate (k, rows) configuration over distinct ids.

    full_collision_pairs counts unordered id pairs whose whole probe tuple
    coincides (identical embeddings forever); the histogram reports probe-0
    row occupancy as {load: number of rows with that load}.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if len(np.unique(ids)) != len(ids):
        raise ValueError("ids must be distinct")
    z = hash_ids(ids, feature_seed)
    idx = row_indices_batch(z, k, rows)
    _, tuple_counts = np.unique(idx, axis=0, return_counts=True)
    pairs = int((tuple_counts * (tuple_counts - 1) // 2).sum())
    loads = np.bincount(idx[:, 0], minlength=rows)
    occupancy, freq = np.unique(loads, return_counts=True)
    return CollisionStats(
        full_collision_pairs=pairs,
        probe0_load_histogram={int(o): int(f) for o, f in zip(occupancy, freq)},
    )
