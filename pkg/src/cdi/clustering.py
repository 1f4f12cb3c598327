"""K-means with deterministic seeding, confidence scoring, optimal assignment,
cross-round centroid alignment, and cluster-count estimation.

Cosine geometry is realized by the caller L2-normalizing points before
Euclidean K-means; confidence is the cosine between a point and its centroid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._seed import derive_rng

log = logging.getLogger(__name__)


class DegenerateGeometryError(ValueError):
    """A cosine was requested for a zero-norm point or centroid."""


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,) int
    confidences: np.ndarray  # (n,) cosine to own centroid
    k: int
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


@dataclass
class AlignmentMap:
    """Relabeling of a new clustering so indices line up with a previous one.

    ``permutation`` maps old index -> new index over the matched pairs;
    ``unmatched`` holds the surplus indices of the larger side.
    """

    permutation: dict[int, int]
    unmatched: set[int]

    def relabel_table(self, k_new: int) -> np.ndarray:
        """Array t where t[new_index] = stable index after alignment.

        Requires the new clustering to be at least as large as the old one
        (cluster counts never shrink across rounds)."""
        if any(old >= k_new for old in self.permutation):
            raise ValueError("cannot relabel a clustering smaller than the previous one")
        table = np.full(k_new, -1, dtype=int)
        for old, new in self.permutation.items():
            table[new] = old
        used = set(self.permutation.keys())
        fresh = (i for i in range(k_new) if i not in used)
        for new in range(k_new):
            if table[new] == -1:
                table[new] = next(fresh)
        return table


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared Euclidean distances, clipped at 0 for float cancellation
    sq = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.maximum(sq, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: per step, draw 2+log(k) D^2-weighted candidates and
    keep the one minimizing the resulting total squared distance."""
    n = points.shape[0]
    n_trials = 2 + int(np.log(k)) if k > 1 else 1
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = _pairwise_sq_dists(points, centers[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            candidates = rng.integers(n, size=n_trials)
        else:
            candidates = rng.choice(n, size=n_trials, p=d2 / total)
        best_idx, best_d2, best_total = -1, None, np.inf
        for idx in candidates:
            cand_d2 = np.minimum(
                d2, _pairwise_sq_dists(points, points[int(idx)][None, :]).ravel()
            )
            cand_total = cand_d2.sum()
            if cand_total < best_total:
                best_idx, best_d2, best_total = int(idx), cand_d2, cand_total
        centers[j] = points[best_idx]
        d2 = best_d2
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are repaired by stealing the point currently farthest from
    its own centroid, which never increases inertia. Deterministic for a
    fixed seed; inertia is non-increasing across iterations (tracked in
    ``inertia_history``).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k or k < 1:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    rng = derive_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)
    history: list[float] = []
    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = _pairwise_sq_dists(points, centroids)
        assign = np.argmin(d2, axis=1)
        own = d2[np.arange(n), assign]
        sizes = np.bincount(assign, minlength=k)
        for empty in np.flatnonzero(sizes == 0):
            donor_ok = sizes[assign] > 1  # never empty another cluster
            idx = int(np.argmax(np.where(donor_ok, own, -np.inf)))
            sizes[assign[idx]] -= 1
            assign[idx] = empty
            sizes[empty] = 1
            centroids[empty] = points[idx]
            own[idx] = 0.0
        history.append(float(own.sum()))
        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = points[assign == j].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    # final assignment against the final centroids
    d2 = _pairwise_sq_dists(points, centroids)
    assign = np.argmin(d2, axis=1)
    own = d2[np.arange(n), assign]
    sizes = np.bincount(assign, minlength=k)
    for empty in np.flatnonzero(sizes == 0):
        donor_ok = sizes[assign] > 1
        idx = int(np.argmax(np.where(donor_ok, own, -np.inf)))
        sizes[assign[idx]] -= 1
        assign[idx] = empty
        sizes[empty] = 1
        centroids[empty] = points[idx]
        own[idx] = 0.0
    inertia = float(own.sum())
    history.append(inertia)
    model = ClusterModel(
        centroids=centroids,
        assignments=assign,
        confidences=np.zeros(n),
        k=k,
        inertia=inertia,
        inertia_history=history,
    )
    model.confidences = _safe_confidences(model, points)
    return model


def _safe_confidences(model: ClusterModel, points: np.ndarray) -> np.ndarray:
    """Cosines to own centroid, 0.0 where the cosine is undefined (zero norm).

    The public confidence_scores op raises on degenerate geometry instead."""
    cents = model.centroids[model.assignments]
    pn = np.linalg.norm(points, axis=1)
    cn = np.linalg.norm(cents, axis=1)
    denom = pn * cn
    cos = np.zeros(len(points))
    ok = denom > 0.0
    cos[ok] = np.einsum("ij,ij->i", points[ok], cents[ok]) / denom[ok]
    return np.clip(cos, -1.0, 1.0)


def confidence_scores(model: ClusterModel, points: np.ndarray) -> np.ndarray:
    """Cosine similarity between each point and its assigned centroid."""
    points = np.asarray(points, dtype=np.float64)
    cents = model.centroids[model.assignments]
    pn = np.linalg.norm(points, axis=1)
    cn = np.linalg.norm(cents, axis=1)
    bad = (pn <= 0.0) | (cn <= 0.0)
    if np.any(bad):
        raise DegenerateGeometryError(
            f"zero-norm point or centroid at index {int(np.flatnonzero(bad)[0])}"
        )
    cos = np.einsum("ij,ij->i", points, cents) / (pn * cn)
    return np.clip(cos, -1.0, 1.0)


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost injective row->column assignment (optimal).

    Requires rows <= cols; pad beforehand otherwise. Returns the column index
    chosen for each row and the total cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    if cost.shape[0] > cost.shape[1]:
        raise ValueError(f"need rows <= cols, got shape {cost.shape}")
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(cost.shape[0], dtype=int)
    assignment[rows] = cols
    return assignment, float(cost[rows, cols].sum())


def align_centroids(prev: ClusterModel, cur: ClusterModel) -> AlignmentMap:
    """Match cur's centroids to prev's (squared Euclidean cost, optimal) so
    cluster indices stay stable across re-clustering rounds."""
    if prev.centroids.shape[1] != cur.centroids.shape[1]:
        raise ValueError(
            f"dimension mismatch: {prev.centroids.shape[1]} vs {cur.centroids.shape[1]}"
        )
    cost = _pairwise_sq_dists(prev.centroids, cur.centroids)
    if prev.k <= cur.k:
        assignment, _ = hungarian(cost)
        permutation = {old: int(assignment[old]) for old in range(prev.k)}
        matched_new = set(permutation.values())
        unmatched = {j for j in range(cur.k) if j not in matched_new}
    else:
        assignment, _ = hungarian(cost.T)  # rows = cur
        permutation = {int(assignment[new]): new for new in range(cur.k)}
        unmatched = {i for i in range(prev.k) if i not in permutation}
    return AlignmentMap(permutation=permutation, unmatched=unmatched)


def apply_alignment(cur: ClusterModel, amap: AlignmentMap) -> ClusterModel:
    """Relabel cur's cluster indices through the alignment map."""
    table = amap.relabel_table(cur.k)
    inverse = np.empty(cur.k, dtype=int)
    inverse[table] = np.arange(cur.k)
    return ClusterModel(
        centroids=cur.centroids[inverse],
        assignments=table[cur.assignments],
        confidences=cur.confidences,
        k=cur.k,
        inertia=cur.inertia,
        inertia_history=list(cur.inertia_history),
    )


def estimate_k(points: np.ndarray, k_prime: int, seed: int) -> int:
    """Over-cluster with k_prime and keep clusters of at least the expected
    mean size t = N / k_prime; the count of survivors estimates k.

    If k_prime exceeds N it is clamped (with a warning). If every cluster
    falls below t, the count of maximal-size nonempty clusters is returned,
    so the estimate is always >= 1.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k_prime < 1:
        raise ValueError("k_prime must be >= 1")
    if k_prime > n:
        log.warning("k_prime=%d exceeds N=%d; clamping", k_prime, n)
        k_prime = n
    model = kmeans(points, k_prime, seed)
    t = n / k_prime
    sizes = model.sizes()
    estimate = int(np.sum(sizes >= t))
    if estimate == 0:
        nonempty = sizes[sizes > 0]
        estimate = int(np.sum(nonempty == nonempty.max()))
    return estimate
