"""Complete-linkage agglomerative clustering and the hierarchical baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import similarity
from .similarity import MetricKind


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merges in order. Leaves are ids ``0..n-1``; merge ``m`` creates id ``n + m``."""

    n: int
    merges: tuple

    def heights(self):
        return np.array([m.height for m in self.merges])


def pairwise_distances(items, metric):
    """Symmetric distance matrix of the rows of ``items`` under ``metric``."""
    X = np.asarray(items, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError(f"need at least 2 items as an (n, T) array, got shape {X.shape}")
    try:
        D = similarity.pairwise(metric, X, X)
    except ValueError as exc:
        raise ValueError(f"metric {MetricKind.parse(metric).value} failed on items of shape {X.shape}: {exc}") from exc
    bad = np.argwhere(~np.isfinite(D))
    if len(bad):
        i, j = bad[0]
        raise ValueError(f"non-finite distance between items {i} and {j}")
    return D


def complete_linkage(D) -> Dendrogram:
    """Greedy complete-linkage merging.

    Ties on the inter-cluster distance go to the pair with the lowest
    (smallest member of first cluster, smallest member of second) indices.
    """
    D = np.array(D, dtype=np.float64)
    n = len(D)
    if D.shape != (n, n):
        raise ValueError(f"distance matrix must be square, got {D.shape}")
    # row r holds the cluster whose smallest member is r
    work = D.copy()
    np.fill_diagonal(work, np.inf)
    work[np.tril_indices(n)] = np.inf
    active = np.ones(n, dtype=bool)
    ids = np.arange(n)
    sizes = np.ones(n, dtype=int)
    merges = []
    for m in range(n - 1):
        flat = int(np.argmin(work))
        i, j = divmod(flat, n)
        height = float(work[i, j])
        size = int(sizes[i] + sizes[j])
        merges.append(Merge(int(ids[i]), int(ids[j]), height, size))
        # complete linkage: distance to the union is the max of both distances
        col = np.maximum(np.where(np.arange(n) < i, work[:, i], work[i, :]),
                         np.where(np.arange(n) < j, work[:, j], work[j, :]))
        col[~active] = np.inf
        active[j] = False
        col[i] = np.inf
        col[j] = np.inf
        work[j, :] = np.inf
        work[:, j] = np.inf
        work[:i, i] = col[:i]
        work[i, i + 1:] = col[i + 1:]
        ids[i] = n + m
        sizes[i] = size
    return Dendrogram(n, tuple(merges))


def cut(dendrogram: Dendrogram, k):
    """Labels for the k clusters left after undoing the last k-1 merges.

    Labels are numbered by first occurrence in item order.
    """
    n = dendrogram.n
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    parent = list(range(2 * n - 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for m, merge in enumerate(dendrogram.merges[:n - k]):
        parent[find(merge.left)] = n + m
        parent[find(merge.right)] = n + m
    roots = [find(i) for i in range(n)]
    relabel = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=int)


def cluster_means(X, labels, k):
    X = np.asarray(X, dtype=np.float64)
    return np.stack([X[labels == j].mean(axis=0) for j in range(k)])


def baseline_cluster(X, metric, k=2, alpha=1.0):
    """Complete-linkage baseline on raw sequences.

    Returns ``(labels, scores)``; ``scores`` is the Student-t soft assignment of
    every sequence to the means of the cut clusters.
    """
    from .clustering import soft_assign

    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("baseline needs a non-empty dataset")
    if len(X) < k:
        raise ValueError(f"cannot form {k} clusters from {len(X)} sequences")
    if len(X) == 1:
        return np.zeros(1, dtype=int), np.ones((1, 1))
    labels = cut(complete_linkage(pairwise_distances(X, metric)), k)
    centroids = cluster_means(X, labels, k)
    return labels, soft_assign(X, centroids, metric, alpha)
