"""L2 normalization and linear dimensionality reduction."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import as_feature_matrix
from .errors import ConfigError, DataFormatError

KINDS = ("pca", "random-orthogonal", "identity")
_PRJ_MAGIC = b"PRJ1"
_PRJ_HEADER = struct.Struct("<4sBII")


def l2_normalize(m) -> np.ndarray:
    """Scale every row to unit Euclidean norm; all-zero rows are left as is."""
    m = as_feature_matrix(m)
    # divide by the row max first so tiny or huge rows neither underflow nor overflow
    scale = np.max(np.abs(m), axis=1, keepdims=True)
    scaled = np.divide(m, scale, out=np.zeros_like(m), where=scale > 0)
    norms = np.linalg.norm(scaled, axis=1, keepdims=True)
    return np.divide(scaled, norms, out=m.copy(), where=norms > 0)


@dataclass(frozen=True, eq=False)
class Projection:
    """A fitted linear map ``x -> basis @ (x - mean)``.

    ``basis`` has orthonormal rows. ``explained_variance`` is only filled in
    for PCA.
    """

    kind: str
    mean: np.ndarray
    basis: np.ndarray
    explained_variance: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown projection kind {self.kind!r}")
        basis = np.atleast_2d(np.asarray(self.basis, dtype=np.float64))
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        if basis.shape[0] > basis.shape[1]:
            raise ConfigError(
                f"out_dims {basis.shape[0]} exceeds in_dims {basis.shape[1]}"
            )
        if mean.shape[0] != basis.shape[1]:
            raise ConfigError("mean length must equal in_dims")
        basis.setflags(write=False)
        mean.setflags(write=False)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "mean", mean)

    @property
    def in_dims(self) -> int:
        return self.basis.shape[1]

    @property
    def out_dims(self) -> int:
        return self.basis.shape[0]


def identity_projection(dims: int) -> Projection:
    return Projection("identity", np.zeros(dims), np.eye(dims))


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    # make each row's largest-magnitude entry positive
    pivots = basis[np.arange(basis.shape[0]), np.argmax(np.abs(basis), axis=1)]
    return basis * np.where(pivots < 0, -1.0, 1.0)[:, None]


def fit_pca(train, out_dims: int) -> Projection:
    """Principal directions of the mean-centered rows of ``train``, via SVD.

    Rows of the basis are ordered by decreasing explained variance
    (squared singular value / (n - 1)).
    """
    x = as_feature_matrix(train)
    n, d = x.shape
    if n < 2:
        raise ConfigError(f"PCA needs at least 2 rows, got {n}")
    if not (1 <= out_dims <= min(d, n - 1)):
        raise ConfigError(
            f"out_dims={out_dims} must be in [1, min(n_dims={d}, n_rows-1={n - 1})]"
        )
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    basis = _fix_signs(vt[:out_dims])
    return Projection("pca", mean, basis, s[:out_dims] ** 2 / (n - 1))


def fit_random_projection(in_dims: int, out_dims: int, seed: int) -> Projection:
    """Orthonormalized Gaussian rows (Householder QR), deterministic per seed."""
    if not (1 <= out_dims <= in_dims):
        raise ConfigError(f"out_dims={out_dims} must be in [1, in_dims={in_dims}]")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((out_dims, in_dims))
    q, r = np.linalg.qr(g.T)
    # fix the QR sign ambiguity so the basis is a function of g alone
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return Projection("random-orthogonal", np.zeros(in_dims), q.T)


def apply_projection(p: Projection, m) -> np.ndarray:
    m = as_feature_matrix(m)
    if m.shape[1] != p.in_dims:
        raise DataFormatError(
            f"dimension mismatch: projection expects {p.in_dims} dims, got {m.shape[1]}"
        )
    if p.kind == "identity":
        return m.copy()
    return (m - p.mean) @ p.basis.T


def back_project(p: Projection, z) -> np.ndarray:
    """Map reduced coordinates back into the input space."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return z @ p.basis + p.mean


def save_projection(p: Projection, path) -> None:
    """Binary sidecar: magic, kind tag, dims, then mean and basis as float64 LE."""
    with open(path, "wb") as fh:
        fh.write(_PRJ_HEADER.pack(_PRJ_MAGIC, KINDS.index(p.kind), p.in_dims, p.out_dims))
        fh.write(p.mean.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(p.basis, dtype="<f8").tobytes())


def load_projection(path) -> Projection:
    raw = Path(path).read_bytes()
    if len(raw) < _PRJ_HEADER.size:
        raise DataFormatError(f"{path}: truncated projection header")
    magic, tag, d_in, d_out = _PRJ_HEADER.unpack_from(raw)
    if magic != _PRJ_MAGIC or tag >= len(KINDS):
        raise DataFormatError(f"{path}: not a projection file")
    expected = _PRJ_HEADER.size + 8 * (d_in + d_in * d_out)
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_PRJ_HEADER.size).astype(np.float64)
    return Projection(KINDS[tag], vals[:d_in], vals[d_in:].reshape(d_out, d_in))
