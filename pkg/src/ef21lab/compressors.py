"""Deterministic Top-K sparsification with its refined contraction guarantee.

Top-K keeps the K entries of largest magnitude and zeroes the rest.  Ties
are broken toward the lowest index, which makes the operator a pure
function and every trajectory built on it bitwise reproducible.  On a
vector supported on s coordinates the squared compression error is at most
(1 - min(K, s)/s) times the squared norm, which is strictly better than
the ambient-dimension factor 1 - K/d whenever s < d.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TopK:
    """Top-K compressor spec: retain k largest-magnitude entries, lowest index wins ties."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"K must be at least 1, got {self.k}")


def topk_compress_rows(spec: TopK, mat: np.ndarray) -> np.ndarray:
    """Apply Top-K independently to every row of a 2-D array."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2:
        raise ValueError("expected a 2-D array of row vectors")
    n, d = mat.shape
    if not 1 <= spec.k <= d:
        raise ValueError(f"K={spec.k} out of range for dimension {d}")
    if spec.k == d:
        return mat.copy()
    out = np.zeros_like(mat)
    rows = np.arange(n)[:, None]
    if spec.k == 1:
        # argmax returns the first maximal position, i.e. the lowest index
        keep = np.abs(mat).argmax(axis=1)[:, None]
    else:
        # stable sort on -|x| keeps the lowest index first among ties
        keep = np.argsort(-np.abs(mat), axis=1, kind="stable")[:, : spec.k]
    out[rows, keep] = mat[rows, keep]
    return out


def topk_compress(spec: TopK, x: np.ndarray) -> np.ndarray:
    """Top-K of a single vector: K largest magnitudes survive, the rest become zero."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D vector")
    return topk_compress_rows(spec, x[None, :])[0]


def contraction_factor(spec: TopK, x: np.ndarray, active_size: int | None = None) -> float:
    """Realized contraction ||C(x) - x||^2 / ||x||^2 (zero for the zero vector).

    When ``active_size`` is given it must dominate the support of x, and the
    returned factor is guaranteed not to exceed 1 - min(K, active_size)/active_size.
    """
    x = np.asarray(x, dtype=float)
    if active_size is not None and np.count_nonzero(x) > active_size:
        raise ValueError(f"vector has {np.count_nonzero(x)} nonzeros, more than active_size={active_size}")
    norm_sq = float(x @ x)
    if norm_sq == 0.0:
        return 0.0
    err = topk_compress(spec, x) - x
    return float(err @ err) / norm_sq


def alpha_for(spec: TopK, j_size: int) -> float:
    """Contraction parameter min(K, s)/s of Top-K on an s-dimensional active subspace."""
    if j_size < 1:
        raise ValueError(f"active-set size must be at least 1, got {j_size}")
    return min(spec.k, j_size) / j_size


def alpha_min(spec: TopK, row_counts: np.ndarray) -> float:
    """Worst contraction parameter over clients: min_i min(K, |J_i|)/|J_i|."""
    return min(alpha_for(spec, int(s)) for s in np.asarray(row_counts).ravel())
