"""Affinity graph of Jaccard distances over k-reciprocal neighbour sets.

The pipeline is: cosine kNN lists (self first) -> reciprocal sets
R(i) = {j | j in knn(i) and i in knn(j)} -> pairwise Jaccard distance
1 - |R(i) & R(j)| / |R(i) | R(j)|. Radius queries against the resulting
matrix use a strict threshold and never return the anchor itself.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureSet
from .errors import ConfigError, UsageError

BASE_METRIC = "cosine-distance"


@dataclass(frozen=True)
class NeighborLists:
    """Per-instance kNN index lists, each starting with the instance itself."""

    lists: np.ndarray  # (N, min(k, N)) int64, ascending base distance
    k: int
    base_metric: str = BASE_METRIC


@dataclass(frozen=True)
class ReciprocalSets:
    """Per-instance reciprocal neighbour sets, stored as sorted index arrays."""

    sets: tuple[np.ndarray, ...]

    def membership(self) -> np.ndarray:
        """Boolean (N, N) matrix, row i marking the members of set i."""
        n = len(self.sets)
        member = np.zeros((n, n), dtype=bool)
        for i, s in enumerate(self.sets):
            member[i, s] = True
        return member


@dataclass(frozen=True)
class AffinityGraph:
    jaccard: np.ndarray  # (N, N) float64, symmetric, zero diagonal
    kappa: int


def compute_knn(fs: FeatureSet, kappa: int) -> NeighborLists:
    """k nearest neighbours per row under 1 - cosine similarity.

    The instance itself is always first (distance 0); remaining slots are
    filled in ascending distance, ties broken by ascending index.
    """
    n = fs.n
    if not 1 <= kappa <= n:
        raise ConfigError(f"kappa must be in [1, {n}], got {kappa}")
    dist = 1.0 - fs.features @ fs.features.T
    # pin self to the front regardless of float round-off on the diagonal
    np.fill_diagonal(dist, -1.0)
    order = np.argsort(dist, axis=1, kind="stable")  # stable = index tie-break
    return NeighborLists(lists=order[:, :kappa].astype(np.int64), k=kappa)


def reciprocal_sets(nl: NeighborLists) -> ReciprocalSets:
    """R(i) = {j : j in knn(i) and i in knn(j)}; always contains i."""
    n = nl.lists.shape[0]
    member = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), nl.lists.shape[1])
    member[rows, nl.lists.ravel()] = True
    mutual = member & member.T
    return ReciprocalSets(sets=tuple(np.flatnonzero(mutual[i]) for i in range(n)))


def jaccard_distance(rs: ReciprocalSets, i: int, j: int) -> float:
    """1 - |R(i) & R(j)| / |R(i) | R(j)|. Sets contain their anchors, so
    the union is never empty."""
    n = len(rs.sets)
    if not (0 <= i < n and 0 <= j < n):
        raise UsageError(f"indices ({i}, {j}) out of range for {n} instances")
    a, b = rs.sets[i], rs.sets[j]
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return 1.0 - inter / union


def build_affinity_graph(fs: FeatureSet, kappa: int) -> AffinityGraph:
    """Full N x N Jaccard-distance matrix from kNN + reciprocal sets."""
    rs = reciprocal_sets(compute_knn(fs, kappa))
    member = rs.membership().astype(np.float64)
    sizes = member.sum(axis=1)
    inter = member @ member.T  # exact: small integer counts in float64
    union = sizes[:, None] + sizes[None, :] - inter
    return AffinityGraph(jaccard=1.0 - inter / union, kappa=kappa)


def neighborhood(g: AffinityGraph, i: int, rho: float, mask: np.ndarray) -> np.ndarray:
    """Indices j != i with j in mask and G[i, j] < rho (strict), sorted by
    distance ascending with index tie-break. May be empty."""
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    mask = np.unique(np.asarray(mask, dtype=np.int64))
    if i not in mask:
        raise UsageError(f"anchor {i} is not in the query mask")
    row = g.jaccard[i]
    cand = mask[(row[mask] < rho) & (mask != i)]
    return cand[np.lexsort((cand, row[cand]))]


def write_graph_csv(g: AffinityGraph, path: str | Path) -> int:
    """Dump upper-triangle entries with d < 1.0 as `i,j,d_jaccard` rows.
    Returns the number of rows written."""
    path = Path(path)
    iu, ju = np.triu_indices_from(g.jaccard, k=1)
    keep = g.jaccard[iu, ju] < 1.0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "d_jaccard"])
        for a, b in zip(iu[keep], ju[keep]):
            writer.writerow([int(a), int(b), repr(float(g.jaccard[a, b]))])
    return int(keep.sum())
