"""k-means with k-means++ seeding, NMI, and the repeated-run clustering score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .dataio import as_feature_matrix
from .errors import ConfigError, DataFormatError

NMI_VARIANTS = ("arithmetic", "geometric")


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    converged: bool
    inertia_history: list[float] = field(default_factory=list)
    transfer_moves: int = 0


def _kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: draw ``2 + floor(ln k)`` D^2-weighted candidates per
    step and keep the one that lowers the seeding potential the most."""
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    d2 = cdist(x, x[chosen], "sqeuclidean")[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            cand = rng.choice(n, size=trials, p=d2 / total)
        else:
            # every point coincides with a chosen centroid; pick any unused row
            cand = rng.choice(np.setdiff1d(np.arange(n), chosen), size=1)
        cand_d2 = np.minimum(d2[None, :], cdist(x[cand], x, "sqeuclidean"))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        chosen.append(int(cand[best]))
        d2 = cand_d2[best]
    return x[chosen].copy()


def _assign(x: np.ndarray, centroids: np.ndarray):
    d2 = cdist(x, centroids, "sqeuclidean")
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(x)), labels]


def _repair_empty(x, labels, centroids, d2, k):
    """Give every empty cluster the point currently farthest from its centroid."""
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        movable = counts[labels] > 1
        cand = np.flatnonzero(movable)
        # farthest point; argmax picks the lowest row index on ties
        i = cand[np.argmax(d2[cand])]
        counts[labels[i]] -= 1
        counts[j] += 1
        labels[i] = j
        centroids[j] = x[i]
        d2[i] = 0.0
    return labels, centroids, d2


def _means(x, labels, k):
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    return sums / np.bincount(labels, minlength=k)[:, None]


def _transfer_refine(x, labels, k, max_passes=1000):
    """Single-point transfers (Hartigan-style) until no move lowers the inertia.

    Moving row i from cluster j to t changes the inertia by
    ``n_t/(n_t+1) d(i,t)^2 - n_j/(n_j-1) d(i,j)^2``. Every pass screens all
    rows at once, then applies the flagged moves one by one against the
    running centroids.
    """
    labels = labels.copy()
    cent = _means(x, labels, k)
    cnt = np.bincount(labels, minlength=k).astype(np.float64)
    rows = np.arange(len(x))
    moves = 0
    for _ in range(max_passes):
        d2 = cdist(x, cent, "sqeuclidean")
        own = cnt[labels]
        saved = np.where(own > 1, own / np.maximum(own - 1, 1) * d2[rows, labels], -np.inf)
        added = cnt / (cnt + 1) * d2
        added[rows, labels] = np.inf
        flagged = np.flatnonzero(added.min(axis=1) < saved * (1 - 1e-12))
        moved = 0
        for i in flagged:
            j = labels[i]
            if cnt[j] <= 1:
                continue
            di = cdist(x[i : i + 1], cent, "sqeuclidean")[0]
            gain = cnt / (cnt + 1) * di
            gain[j] = np.inf
            t = int(np.argmin(gain))
            if gain[t] < cnt[j] / (cnt[j] - 1) * di[j] * (1 - 1e-12):
                cent[j] = (cent[j] * cnt[j] - x[i]) / (cnt[j] - 1)
                cent[t] = (cent[t] * cnt[t] + x[i]) / (cnt[t] + 1)
                cnt[j] -= 1
                cnt[t] += 1
                labels[i] = t
                moved += 1
        moves += moved
        if moved == 0:
            break
    return labels, moves


def kmeans(
    m,
    k: int,
    seed: int = 0,
    max_iters: int = 300,
    rel_tolerance: float = 1e-6,
    transfer_refinement: bool = True,
) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding.

    Stops once the relative inertia decrease falls below ``rel_tolerance`` or
    after ``max_iters`` assignment steps. With ``transfer_refinement`` the
    Lloyd solution is then polished by single-point transfers, which escape
    Lloyd fixed points that moving one row would still improve. Clusters
    never end up empty.
    """
    x = as_feature_matrix(m)
    n = x.shape[0]
    if not (1 <= k <= n):
        raise ConfigError(f"k={k} must be in [1, n_rows={n}]")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plusplus(x, k, rng)
    history: list[float] = []
    converged = False
    it = 0
    while True:
        labels, d2 = _assign(x, centroids)
        labels, centroids, d2 = _repair_empty(x, labels, centroids, d2, k)
        inertia = float(d2.sum())
        history.append(inertia)
        it += 1
        if len(history) > 1:
            prev = history[-2]
            if prev - inertia <= rel_tolerance * prev:
                converged = True
                break
        if it >= max_iters:
            break
        centroids = _means(x, labels, k)
    moves = 0
    if transfer_refinement and 1 < k < n:
        refined, moves = _transfer_refine(x, labels, k)
        if moves:
            cent = _means(x, refined, k)
            d2 = cdist(x, cent, "sqeuclidean")[np.arange(n), refined]
            if d2.sum() < inertia:
                labels, centroids, inertia = refined, cent, float(d2.sum())
                history.append(inertia)
            else:
                moves = 0
    return KMeansResult(labels, centroids, inertia, it, converged, history, moves)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(assignments, labels, variant: str = "arithmetic") -> float:
    """Normalized mutual information from the contingency table (natural logs).

    ``variant="arithmetic"`` divides I by the mean of the two entropies,
    ``"geometric"`` by their geometric mean. Two constant partitions score 1;
    a constant partition against a non-constant one scores 0.
    """
    a = np.asarray(assignments).reshape(-1)
    b = np.asarray(labels).reshape(-1)
    if a.shape != b.shape:
        raise DataFormatError(f"length mismatch: {a.size} assignments vs {b.size} labels")
    if a.size == 0:
        raise DataFormatError("nmi needs at least one element")
    if variant not in NMI_VARIANTS:
        raise ConfigError(f"unknown NMI variant {variant!r}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    row, col = table.sum(axis=1), table.sum(axis=0)
    h_a, h_b = _entropy(row, n), _entropy(col, n)
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    nz = table > 0
    joint = table[nz] / n
    outer = (row[:, None] * col[None, :])[nz] / (n * n)
    mi = float(np.sum(joint * np.log(joint / outer)))
    denom = 0.5 * (h_a + h_b) if variant == "arithmetic" else np.sqrt(h_a * h_b)
    return float(min(1.0, max(0.0, mi / denom)))


@dataclass
class ClusteringEval:
    nmi_mean: float
    nmi_std: float
    run_count: int
    k: int
    per_run_nmi: list[float]
    nmi_variant: str = "arithmetic"

    def to_dict(self) -> dict:
        return {
            "nmi_mean": self.nmi_mean,
            "nmi_std": self.nmi_std,
            "nmi_best": max(self.per_run_nmi),
            "run_count": self.run_count,
            "k": self.k,
            "nmi_variant": self.nmi_variant,
            "per_run_nmi": list(self.per_run_nmi),
        }


def clustering_eval(
    m,
    labels,
    k: int | None = None,
    runs: int = 100,
    seed: int = 0,
    nmi_variant: str = "arithmetic",
    max_iters: int = 300,
    rel_tolerance: float = 1e-6,
    transfer_refinement: bool = True,
) -> ClusteringEval:
    """Run k-means ``runs`` times (seeds ``seed + i``) and summarize NMI.

    ``k`` defaults to the number of distinct labels.
    """
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    x = as_feature_matrix(m)
    labels = np.asarray(labels)
    if k is None:
        k = len(np.unique(labels))
    scores = [
        nmi(kmeans(x, k, seed + i, max_iters, rel_tolerance, transfer_refinement).assignments,
            labels, nmi_variant)
        for i in range(runs)
    ]
    arr = np.asarray(scores)
    return ClusteringEval(float(arr.mean()), float(arr.std()), runs, k, scores, nmi_variant)
