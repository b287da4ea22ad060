"""Softmax / cross-entropy primitives and feature-space distances.

The invariant-shift metric treats two features as equal when the linear
output layer ``W`` maps them to the same softmax probabilities. A shift
``s`` leaves ``softmax(W x + b)`` unchanged exactly when ``W s`` is a
multiple of the all-ones vector, i.e. when ``s`` lies in

    S = span{W^+ 1} + null(W),    W^+ = W^T (W W^T)^-1.

The distance between ``x1`` and ``x2`` is the smallest Euclidean norm of
``x1 - x2 - s`` over ``s`` in ``S``; it is attained by the orthogonal
projection of the difference onto the complement of ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .dataio import as_feature_matrix
from .errors import ConfigError, DataFormatError, NumericError

DISTANCES = ("euclidean", "cosine")


def softmax(u, axis: int = -1) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    z = np.exp(u - np.max(u, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def log_softmax(u, axis: int = -1) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    shifted = u - np.max(u, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def cross_entropy(p, q) -> float:
    """``-sum(q * log p)`` for a one-hot ``q`` (vector, or the true class index).

    Returns ``inf`` when the true class has probability exactly 0.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.ndim(q) == 0:
        true = int(q)
    else:
        q = np.asarray(q)
        if q.shape != p.shape or np.count_nonzero(q) != 1 or q.max() != 1:
            raise ConfigError("target must be one-hot with the same length as p")
        true = int(np.argmax(q))
    if p[true] <= 0.0:
        return float("inf")
    return float(-np.log(p[true]))


def pairwise_distances(m, metric: str = "euclidean", other=None) -> np.ndarray:
    """Dense distance matrix between rows of ``m`` (and ``other`` if given).

    ``cosine`` is ``1 - cos(angle)`` and refuses zero rows.
    """
    a = as_feature_matrix(m)
    b = a if other is None else as_feature_matrix(other, name="other")
    if metric not in DISTANCES:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {DISTANCES}")
    if metric == "cosine":
        for name, x in (("m", a), ("other", b)):
            zero = np.flatnonzero(~np.any(x != 0, axis=1))
            if len(zero):
                raise DataFormatError(f"cosine distance undefined for zero row {zero[0]} of {name}")
    dist = cdist(a, b, metric=metric)
    if other is None:
        np.fill_diagonal(dist, 0.0)
    return dist


@dataclass(frozen=True, eq=False)
class InvariantShiftMetric:
    """Output-layer matrix ``W`` together with the bases that define ``S``.

    ``s_basis`` columns are an orthonormal basis of ``S``; ``complement``
    columns are an orthonormal basis of its orthogonal complement (dimension
    ``rank - 1``), so ``complement.T @ x`` gives coordinates in which the
    plain Euclidean distance equals the invariant distance.
    """

    W: np.ndarray
    pinv_dir: np.ndarray
    null_basis: np.ndarray
    s_basis: np.ndarray
    complement: np.ndarray
    rank_tolerance: float

    @property
    def dims(self) -> int:
        return self.W.shape[1]

    def residual(self, x) -> np.ndarray:
        """Component of ``x`` (rows) orthogonal to ``S``."""
        x = np.asarray(x, dtype=np.float64)
        return x - (x @ self.s_basis) @ self.s_basis.T

    def embed(self, m) -> np.ndarray:
        """Coordinates in the complement of ``S``; Euclidean there == invariant distance."""
        m = as_feature_matrix(m)
        if m.shape[1] != self.dims:
            raise DataFormatError(f"expected {self.dims}-dim features, got {m.shape[1]}")
        return m @ self.complement


def invariant_shift_basis(W, rank_tolerance: float = 1e-10) -> InvariantShiftMetric:
    """Build the invariant subspace for a ``C x D`` output matrix (``D > C``).

    Singular values below ``rank_tolerance * sigma_max`` count as zero; the
    null space is read off the corresponding right singular vectors.
    """
    W = np.atleast_2d(np.array(W, dtype=np.float64))
    C, D = W.shape
    if not np.all(np.isfinite(W)):
        raise DataFormatError("W contains non-finite values")
    if D <= C:
        raise ConfigError(
            f"invariant subspace degenerates to null space / empty: need D > C, got C={C}, D={D}"
        )
    u, s, vt = np.linalg.svd(W, full_matrices=True)
    if s[0] == 0.0:
        raise NumericError("W is identically zero (rank 0)")
    rank = int(np.sum(s > rank_tolerance * s[0]))
    if rank < C:
        raise NumericError(f"W is rank deficient: computed rank {rank} < C={C}")
    row_space = vt[:C]
    null_basis = vt[C:].T
    # W^+ 1 = V diag(1/s) U^T 1
    pinv_dir = row_space.T @ ((u.T @ np.ones(C)) / s)
    unit_dir = pinv_dir / np.linalg.norm(pinv_dir)
    s_basis = np.column_stack([unit_dir, null_basis])
    # complement of unit_dir inside the row space, expressed in row-space coordinates
    coords = row_space @ unit_dir
    inner = scipy.linalg.null_space(coords[None, :])
    complement = row_space.T @ inner
    for arr in (W, pinv_dir, null_basis, s_basis, complement):
        arr.setflags(write=False)
    return InvariantShiftMetric(W, pinv_dir, null_basis, s_basis, complement, rank_tolerance)


def invariant_distance(metric: InvariantShiftMetric, x1, x2) -> float:
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1)
    if x1.shape != x2.shape or x1.shape[0] != metric.dims:
        raise DataFormatError(
            f"length mismatch: metric has {metric.dims} dims, got {x1.shape[0]} and {x2.shape[0]}"
        )
    return float(np.linalg.norm(metric.residual(x1 - x2)))
