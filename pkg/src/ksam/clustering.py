"""K-medoids (PAM) and K-means over 2-D pixel coordinates.

Points are ``(row, col)`` pairs. Wherever two candidates are equally good,
the one that comes first in row-major order wins, which makes every result
reproducible without relying on a random seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.cluster import KMeans
from sklearn.utils.validation import check_array, check_is_fitted

# relative slack used when comparing floating costs; keeps tie-breaking
# stable under rescaling of the coordinates
_REL_TOL = 1e-12


def _first_best(values, *, maximize=False):
    """Index of the first entry within relative tolerance of the optimum."""
    values = np.asarray(values, dtype=float)
    best = values.max() if maximize else values.min()
    slack = _REL_TOL * max(abs(best), 1e-300)
    if maximize:
        return int(np.flatnonzero(values >= best - slack)[0])
    return int(np.flatnonzero(values <= best + slack)[0])


def _row_major_order(X):
    # lexsort keys are given last-key-primary
    return np.lexsort((X[:, 1], X[:, 0]))


def _pam_build(D, k):
    n = D.shape[0]
    medoids = [_first_best(D.sum(axis=1))]
    nearest = D[:, medoids[0]].copy()
    while len(medoids) < k:
        gain = np.maximum(nearest[:, None] - D, 0.0).sum(axis=0)
        gain[medoids] = -np.inf
        h = _first_best(gain, maximize=True)
        medoids.append(h)
        nearest = np.minimum(nearest, D[:, h])
    assert len(set(medoids)) == k <= n
    return medoids


def _pam_swap(D, medoids, max_iter):
    """Best-improvement swap search; returns medoids, cost trace, swap count."""
    medoids = list(medoids)
    k = len(medoids)
    cost = float(D[:, medoids].min(axis=1).sum())
    history = [cost]
    n_swaps = 0
    while n_swaps < max_iter:
        Dm = D[:, medoids]
        part = np.argsort(Dm, axis=1, kind="stable")
        nearest_slot = part[:, 0]
        nearest = np.take_along_axis(Dm, part[:, :1], axis=1)[:, 0]
        if k > 1:
            second = np.take_along_axis(Dm, part[:, 1:2], axis=1)[:, 0]
        else:
            second = np.full(D.shape[0], np.inf)

        # swap_cost[i, h]: total cost after replacing medoid slot i with point h
        swap_cost = np.empty((k, D.shape[0]))
        for i in range(k):
            without_i = np.where(nearest_slot == i, second, nearest)
            swap_cost[i] = np.minimum(D, without_i[:, None]).sum(axis=0)
        swap_cost[:, medoids] = np.inf

        best = swap_cost.min()
        if not best < cost * (1.0 - _REL_TOL):
            break
        # prefer the lowest incoming point, then the lowest outgoing medoid
        slack = _REL_TOL * max(best, 1e-300)
        slots, cands = np.nonzero(swap_cost <= best + slack)
        h = int(cands.min())
        i = min(int(s) for s, c in zip(slots, cands) if c == h)
        medoids[i] = h
        cost = float(D[:, medoids].min(axis=1).sum())
        history.append(cost)
        n_swaps += 1
    return medoids, history, n_swaps


@dataclass
class MedoidResult:
    medoid_indices: list
    medoids: np.ndarray
    total_cost: float
    iterations: int
    cost_history: list = field(default_factory=list)


class KMedoids(ClusterMixin, BaseEstimator):
    """Partitioning Around Medoids with greedy BUILD and best-swap SWAP.

    Parameters
    ----------
    n_clusters : int
        Number of medoids.
    max_iter : int
        Upper bound on accepted swaps.

    Attributes
    ----------
    medoid_indices_ : ndarray of shape (n_clusters,)
        Indices into the training data, sorted in row-major order of the
        medoid coordinates.
    cluster_centers_ : ndarray of shape (n_clusters, 2)
    labels_ : ndarray of shape (n_samples,)
    inertia_ : float
        Sum of Euclidean distances from each point to its nearest medoid.
    cost_history_ : list of float
        Total cost after BUILD and after every accepted swap.
    n_iter_ : int
    """

    def __init__(self, n_clusters=2, max_iter=300):
        self.n_clusters = n_clusters
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(X, dtype=None, ensure_min_samples=1)
        if X.shape[1] != 2:
            raise ValueError(f"expected (n, 2) coordinates, got {X.shape}")
        n = X.shape[0]
        k = int(self.n_clusters)
        if not 1 <= k <= n:
            raise ValueError(f"n_clusters={k} must be in [1, {n}]")

        order = _row_major_order(X)
        Xs = X[order].astype(float)
        D = cdist(Xs, Xs)
        medoids = _pam_build(D, k)
        medoids, history, n_swaps = _pam_swap(D, medoids, self.max_iter)
        medoids = sorted(medoids)

        self.medoid_indices_ = order[medoids]
        self.cluster_centers_ = X[self.medoid_indices_]
        self.labels_ = self.predict(X)
        self.inertia_ = history[-1]
        self.cost_history_ = history
        self.n_iter_ = n_swaps
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=None)
        # ties go to the first medoid in row-major order
        return np.argmin(cdist(X.astype(float), self.cluster_centers_.astype(float)), axis=1)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=None)
        return cdist(X.astype(float), self.cluster_centers_.astype(float))


def k_medoids(points, k, seed=0, max_iter=300) -> MedoidResult:
    """Cluster pixel coordinates with PAM.

    ``seed`` is accepted so both clusterers share one call signature; PAM
    itself is fully deterministic.
    """
    points = np.asarray(points)
    if points.size == 0:
        raise ValueError("cannot cluster an empty point set")
    if k > len(points):
        raise ValueError(f"k={k} exceeds the number of points ({len(points)})")
    est = KMedoids(n_clusters=k, max_iter=max_iter).fit(points)
    return MedoidResult(
        medoid_indices=[int(i) for i in est.medoid_indices_],
        medoids=np.asarray(est.cluster_centers_),
        total_cost=float(est.inertia_),
        iterations=est.n_iter_,
        cost_history=list(est.cost_history_),
    )


@dataclass
class CentroidResult:
    centroids: np.ndarray
    snapped: np.ndarray
    labels: np.ndarray
    iterations: int


def snap_to_pixels(centroids, bounds=None) -> np.ndarray:
    """Round real (row, col) centroids to the nearest pixel, clamped in-bounds."""
    snapped = np.floor(np.asarray(centroids, dtype=float) + 0.5).astype(np.int64)
    if bounds is not None:
        snapped[:, 0] = np.clip(snapped[:, 0], 0, bounds[0] - 1)
        snapped[:, 1] = np.clip(snapped[:, 1], 0, bounds[1] - 1)
    return snapped


def k_means(points, k, seed=0, max_iter=300, bounds=None) -> CentroidResult:
    """Lloyd K-means; centroids are means and generally not data points."""
    points = np.asarray(points)
    if points.size == 0:
        raise ValueError("cannot cluster an empty point set")
    if k > len(points):
        raise ValueError(f"k={k} exceeds the number of points ({len(points)})")
    km = KMeans(n_clusters=k, n_init=1, max_iter=max_iter, random_state=seed)
    km.fit(points.astype(float))
    return CentroidResult(
        centroids=km.cluster_centers_,
        snapped=snap_to_pixels(km.cluster_centers_, bounds),
        labels=km.labels_,
        iterations=int(km.n_iter_),
    )


def subsample(points, cap, seed=0) -> np.ndarray:
    """Uniform sample of at most ``cap`` points, original order preserved."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    points = np.asarray(points)
    if len(points) <= cap:
        return points
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(points), size=cap, replace=False))
    return points[keep]
