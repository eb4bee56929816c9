"""Density clustering of sequence-level instances and prototype extraction.

DBSCAN is written out longhand (no spatial index): instance counts at desk
scale make the O(N^2) neighbour search trivial, and the explicit scan order
pins down border-point ties and cluster numbering, which training
determinism depends on.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


def dbscan(instances: Array, eps: float, min_samples: int) -> Array:
    """Classic DBSCAN with Euclidean distance; returns labels, -1 = outlier.

    A point is core when at least ``min_samples`` points (itself included)
    lie within ``eps``. Clusters are grown from core points in ascending
    index order, so cluster numbering follows the first core point
    encountered and a border point reachable from several clusters joins the
    one discovered first.
    """
    instances = np.asarray(instances, dtype=np.float64)
    if instances.ndim != 2 or instances.shape[0] < 1:
        raise ValueError("instances must be a non-empty (N, h) matrix")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_samples < 1:
        raise ValueError("min_samples must be >= 1")
    n = instances.shape[0]
    sq = ((instances[:, None, :] - instances[None, :, :]) ** 2).sum(axis=2)
    within = sq <= eps * eps
    core = within.sum(axis=1) >= min_samples
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            point = queue.popleft()
            for neighbor in np.flatnonzero(within[point]):
                if labels[neighbor] == -1:
                    labels[neighbor] = cluster
                    if core[neighbor]:
                        queue.append(neighbor)
        cluster += 1
    return labels


def compute_prototypes(instances: Array, labels: Array) -> Array:
    """Row c = mean of instances labelled c; outliers excluded."""
    instances = np.asarray(instances, dtype=np.float64)
    labels = np.asarray(labels)
    n_clusters = int(labels.max()) + 1 if labels.size else 0
    if n_clusters < 1:
        raise ValueError("all points are outliers; no prototypes to compute")
    prototypes = np.empty((n_clusters, instances.shape[1]))
    for c in range(n_clusters):
        members = instances[labels == c]
        prototypes[c] = members.mean(axis=0)
    return prototypes


def suggest_eps(
    instances: Array, min_samples: int, quantiles: tuple[float, ...] = (0.25, 0.5, 0.75, 0.9)
) -> dict[str, float]:
    """Label-free eps candidates from k-nearest-neighbour distances.

    For each point, take the distance to its (min_samples-1)-th nearest
    other point (the radius at which it would become core); report the
    requested quantiles over points. With min_samples=1 every point is core
    at any radius, so the nearest-neighbour distance is used instead.
    """
    instances = np.asarray(instances, dtype=np.float64)
    n = instances.shape[0]
    if n < 2:
        raise ValueError("need at least two instances to suggest eps")
    k = max(min_samples - 1, 1)
    k = min(k, n - 1)
    sq = ((instances[:, None, :] - instances[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(sq, np.inf)
    kth = np.sqrt(np.sort(sq, axis=1)[:, k - 1])
    return {f"q{q:g}": float(np.quantile(kth, q)) for q in quantiles}


@dataclass
class ClusterState:
    """Per-level clustering snapshot used within one training epoch."""

    eps: float
    min_samples: int
    labels: list[Array] = field(default_factory=list)
    prototypes: list[Array | None] = field(default_factory=list)

    @property
    def n_levels(self) -> int:
        return len(self.labels)

    def cluster_counts(self) -> list[int]:
        return [int(lab.max()) + 1 if lab.size and lab.max() >= 0 else 0 for lab in self.labels]

    def outlier_counts(self) -> list[int]:
        return [int((lab == -1).sum()) for lab in self.labels]

    def stats(self) -> dict:
        """JSON-able summary: per level C, size histogram, outlier count."""
        levels = []
        for lab in self.labels:
            n_clusters = int(lab.max()) + 1 if lab.size and lab.max() >= 0 else 0
            sizes = [int((lab == c).sum()) for c in range(n_clusters)]
            levels.append(
                {
                    "clusters": n_clusters,
                    "cluster_sizes": sizes,
                    "outliers": int((lab == -1).sum()),
                    "points": int(lab.size),
                }
            )
        return {"eps": self.eps, "min_samples": self.min_samples, "levels": levels}


def cluster_levels(
    level_instances: list[Array], eps: float, min_samples: int, l2_normalize: bool = False
) -> ClusterState:
    """Run DBSCAN independently per level and compute prototypes.

    ``l2_normalize`` rescales instances to unit norm before clustering (off
    by default; kept as an ablation switch). Prototypes are always means of
    the raw, unnormalized instance vectors.
    """
    state = ClusterState(eps=eps, min_samples=min_samples)
    for instances in level_instances:
        points = instances
        if l2_normalize:
            norms = np.linalg.norm(instances, axis=1, keepdims=True)
            points = instances / np.maximum(norms, 1e-12)
        labels = dbscan(points, eps, min_samples)
        state.labels.append(labels)
        if labels.max() >= 0:
            state.prototypes.append(compute_prototypes(instances, labels))
        else:
            state.prototypes.append(None)
    return state
