"""Exact nearest-neighbor search and Recall@K."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .dataio import as_feature_matrix
from .errors import ConfigError, DataFormatError
from .metrics import InvariantShiftMetric

METRICS = ("euclidean", "cosine", "invariant-shift")


def _prepare(m: np.ndarray, metric: str, invariant: InvariantShiftMetric | None):
    if metric == "invariant-shift":
        if invariant is None:
            raise ConfigError("metric 'invariant-shift' needs an InvariantShiftMetric")
        return invariant.embed(m), "euclidean"
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if metric == "cosine":
        zero = np.flatnonzero(~np.any(m != 0, axis=1))
        if len(zero):
            raise DataFormatError(f"cosine distance undefined for zero row {zero[0]}")
    return m, metric


def knn_indices(
    m,
    K: int,
    metric: str = "euclidean",
    invariant: InvariantShiftMetric | None = None,
    block_size: int = 1024,
) -> np.ndarray:
    """Indices of the ``K`` nearest other rows for every row.

    Neighbors are sorted by ascending distance, ties by ascending row index;
    a row never retrieves itself. Distances are computed one block of query
    rows at a time.
    """
    x = as_feature_matrix(m)
    n = x.shape[0]
    if not (1 <= K <= n - 1):
        raise ConfigError(f"K={K} must be in [1, n_rows-1={n - 1}]")
    x, base = _prepare(x, metric, invariant)
    out = np.empty((n, K), dtype=np.int64)
    for start in range(0, n, block_size):
        stop = min(n, start + block_size)
        dist = cdist(x[start:stop], x, metric=base)
        dist[np.arange(stop - start), np.arange(start, stop)] = np.inf
        # K-th smallest value per row; everything at or below it is a candidate
        kth = np.partition(dist, K - 1, axis=1)[:, K - 1]
        for r in range(stop - start):
            cand = np.flatnonzero(dist[r] <= kth[r])
            order = np.argsort(dist[r, cand], kind="stable")
            out[start + r] = cand[order[:K]]
    return out


@dataclass
class RetrievalEval:
    ks: list[int]
    recall_at: dict[int, float]
    metric: str
    n_queries: int
    n_singleton_queries: int = 0
    definition: str = field(default="hit if any of the K nearest other rows shares the query's class")

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "metric": self.metric,
            "n_queries": self.n_queries,
            "n_singleton_queries": self.n_singleton_queries,
            "definition": self.definition,
        }


def recall_at_k(
    m,
    labels,
    ks=(1, 2, 4, 8),
    metric: str = "euclidean",
    invariant: InvariantShiftMetric | None = None,
) -> RetrievalEval:
    """Fraction of rows whose top-K neighbors include a same-class row.

    Queries whose class has a single member can never hit; they stay in the
    denominator and are counted in ``n_singleton_queries``.
    """
    ks = sorted({int(k) for k in ks})
    if not ks:
        raise ConfigError("ks must not be empty")
    labels = np.asarray(labels).reshape(-1)
    x = as_feature_matrix(m)
    if len(labels) != x.shape[0]:
        raise DataFormatError(f"{len(labels)} labels for {x.shape[0]} rows")
    nn = knn_indices(x, ks[-1], metric, invariant)
    hits = labels[nn] == labels[:, None]
    first_hit = np.where(hits.any(axis=1), hits.argmax(axis=1), ks[-1])
    recall = {k: float(np.mean(first_hit < k)) for k in ks}
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return RetrievalEval(ks, recall, metric, len(labels), int(np.sum(counts[inverse] == 1)))
