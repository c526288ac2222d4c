"""Pseudo labels via DBSCAN on the Jaccard distance matrix.

The clustering is written out longhand instead of calling a library so the
tie-breaking rules are pinned: cluster ids follow the ascending index of
each cluster's first core point, and a border point reachable from several
clusters keeps the lowest cluster id. Both choices make epochs repeatable.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureSet, normalize_rows
from .errors import ConfigError, UsageError
from .graph import AffinityGraph
from .losses import MemoryBank


@dataclass(frozen=True)
class PseudoLabelSet:
    """Hard cluster assignment: id >= 0 per inlier, -1 per outlier."""

    assignment: np.ndarray  # (N,) int64
    num_clusters: int

    def __post_init__(self):
        a = self.assignment
        if a.size and a.min() < -1:
            raise UsageError("labels must be cluster ids >= 0 or -1 for outliers")
        present = np.unique(a[a >= 0])
        if present.size != self.num_clusters or (
            present.size and (present != np.arange(self.num_clusters)).any()
        ):
            raise UsageError("cluster ids must be contiguous 0..K-1, each nonempty")

    @property
    def inliers(self) -> np.ndarray:
        return np.flatnonzero(self.assignment >= 0)

    @property
    def n_clustered(self) -> int:
        return int((self.assignment >= 0).sum())


def dbscan(g: AffinityGraph, eps: float, min_samples: int) -> PseudoLabelSet:
    """Density clustering over the precomputed Jaccard matrix.

    Core point: at least min_samples points (itself included) at distance
    <= eps. Clusters are BFS expansions over core points, scanned in
    ascending index order; border points join the first cluster that
    reaches them, which is the lowest-id one. Everything else is -1.
    """
    if not 0.0 < eps <= 1.0:
        raise ConfigError(f"eps must be in (0, 1], got {eps}")
    if min_samples < 1:
        raise ConfigError(f"min_samples must be >= 1, got {min_samples}")
    n = g.jaccard.shape[0]
    within = g.jaccard <= eps
    core = within.sum(axis=1) >= min_samples
    assignment = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for seed in range(n):
        if not core[seed] or assignment[seed] >= 0:
            continue
        assignment[seed] = cluster
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for q in np.flatnonzero(within[p]):
                if assignment[q] >= 0:
                    continue
                assignment[q] = cluster
                if core[q]:
                    queue.append(q)
        cluster += 1
    return PseudoLabelSet(assignment=assignment, num_clusters=cluster)


def one_hot(pls: PseudoLabelSet, i: int) -> np.ndarray:
    """K-vector with a single 1 at instance i's cluster id."""
    if not 0 <= i < len(pls.assignment):
        raise UsageError(f"index {i} out of range")
    label = pls.assignment[i]
    if label < 0:
        raise UsageError(f"instance {i} is an outlier, it has no one-hot label")
    vec = np.zeros(pls.num_clusters, dtype=np.float64)
    vec[label] = 1.0
    return vec


def init_memory_bank(
    embeddings: FeatureSet,
    pls: PseudoLabelSet,
    gamma: float = 0.9,
    tau: float = 0.05,
) -> MemoryBank:
    """One unit-norm centroid per cluster: member mean, re-normalized."""
    if len(pls.assignment) != embeddings.n:
        raise UsageError("pseudo labels and embeddings disagree on N")
    k = pls.num_clusters
    if k == 0:
        raise UsageError("cannot build a memory bank with zero clusters")
    centroids = np.zeros((k, embeddings.dim), dtype=np.float64)
    for c in range(k):
        centroids[c] = embeddings.features[pls.assignment == c].mean(axis=0)
    return MemoryBank(centroids=normalize_rows(centroids), gamma=gamma, tau=tau)


def write_clusters_csv(pls: PseudoLabelSet, path: str | Path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "cluster_id"])
        for i, label in enumerate(pls.assignment):
            writer.writerow([i, int(label)])
