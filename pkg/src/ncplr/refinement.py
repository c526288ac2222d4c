"""Soft label refinement: interpolate each hard pseudo label with a
weighted ensemble of its neighbours' predictions.

    y_hat_i = alpha * y_i + (1 - alpha) * sum_j w_ij * p_j

Neighbours come from radius queries against the Jaccard affinity graph,
restricted to clustered inliers. Weights are either uniform or a softmax
over d_J(i, j) / tau_d, which deliberately hands LARGER distances HIGHER
weight: nearby neighbours already agree with the anchor, so the informative
signal for rescuing a mislabeled point sits at the far edge of its
neighbourhood. Refined targets are constants downstream; no gradient ever
flows through p_j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import PseudoLabelSet, one_hot
from .errors import ConfigError, StalenessError, UsageError
from .graph import AffinityGraph, neighborhood

STRATEGIES = ("average", "distance-softmax")


@dataclass(frozen=True)
class RefineConfig:
    alpha: float = 0.2
    rho: float = 0.2
    strategy: str = "average"
    tau_d: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.tau_d <= 0:
            raise ConfigError(f"tau_d must be positive, got {self.tau_d}")


@dataclass(frozen=True)
class RefinedLabelMatrix:
    """One simplex row of soft targets per refined instance."""

    targets: np.ndarray  # (n_rows, K) float64
    indices: np.ndarray  # (n_rows,) instance index of each row
    alpha: float
    rho: float
    strategy: str
    tau_d: float

    def __post_init__(self):
        t = self.targets
        if t.size and (t.min() < -1e-12 or not np.allclose(t.sum(axis=1), 1.0, atol=1e-6)):
            raise UsageError("refined rows must lie on the probability simplex")


@dataclass
class PredictionBank:
    """Latest class predictions for every instance, both model streams.

    Eq-style refinement needs predictions for neighbours that are not in
    the current mini-batch, so the trainer keeps this bank: teacher rows
    are written after every forward pass, student rows likewise, and
    in-batch rows are substituted live where freshness matters. At the
    start of an epoch all rows are the one-hot cluster labels (uniform for
    outliers, which are never queried).
    """

    student: np.ndarray   # (N, K) simplex rows
    teacher: np.ndarray   # (N, K) simplex rows
    freshness: np.ndarray # (N,) int64 step stamp

    @property
    def k(self) -> int:
        return self.student.shape[1]

    def update(self, rows: np.ndarray, student: np.ndarray, teacher: np.ndarray, stamp: int) -> None:
        self.student[rows] = student
        self.teacher[rows] = teacher
        self.freshness[rows] = stamp


def init_prediction_bank(pls: PseudoLabelSet) -> PredictionBank:
    n, k = len(pls.assignment), pls.num_clusters
    student = np.full((n, k), 1.0 / k, dtype=np.float64)
    inl = pls.inliers
    student[inl] = 0.0
    student[inl, pls.assignment[inl]] = 1.0
    return PredictionBank(student=student, teacher=student.copy(),
                          freshness=np.zeros(n, dtype=np.int64))


def neighbor_weights(
    g: AffinityGraph,
    nbrs: np.ndarray,
    anchor: int,
    strategy: str = "average",
    tau_d: float = 0.05,
) -> np.ndarray:
    """Convex weights over a nonempty neighbour list."""
    nbrs = np.asarray(nbrs, dtype=np.int64)
    if nbrs.size == 0:
        raise UsageError("neighbor_weights needs a nonempty neighbour list")
    if strategy == "average":
        return np.full(nbrs.size, 1.0 / nbrs.size, dtype=np.float64)
    if strategy != "distance-softmax":
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    scores = g.jaccard[anchor, nbrs] / tau_d
    scores -= scores.max()
    w = np.exp(scores)
    return w / w.sum()


def refine_label(
    y: np.ndarray,
    nbr_preds: np.ndarray,
    weights: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Exact convex combination; an empty neighbourhood returns y as-is."""
    nbr_preds = np.asarray(nbr_preds, dtype=np.float64)
    if nbr_preds.size == 0:
        return y.copy()
    if nbr_preds.ndim != 2 or nbr_preds.shape[1] != y.shape[0]:
        raise UsageError(
            f"refine_label: neighbour rows {nbr_preds.shape} vs label length {y.shape[0]}"
        )
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != nbr_preds.shape[0]:
        raise UsageError("refine_label: one weight per neighbour row required")
    if abs(weights.sum() - 1.0) > 1e-6:
        raise UsageError(f"refine_label: weights sum to {weights.sum()}, not 1")
    return alpha * y + (1.0 - alpha) * (weights @ nbr_preds)


def refine_all(
    pls: PseudoLabelSet,
    bank: PredictionBank,
    g: AffinityGraph,
    cfg: RefineConfig,
    rows: np.ndarray | None = None,
) -> RefinedLabelMatrix:
    """Refine every inlier (or just `rows`, a subset of the inliers).

    Neighbour predictions are read from the student side of the bank;
    neighbourhood queries are restricted to inliers.
    """
    if bank.k != pls.num_clusters:
        raise StalenessError(
            f"prediction bank has K={bank.k}, labels have K={pls.num_clusters}"
        )
    inliers = pls.inliers
    if rows is None:
        anchors = inliers
    else:
        anchors = np.asarray(rows, dtype=np.int64)
        if not np.isin(anchors, inliers).all():
            raise UsageError("refine_all: rows must be a subset of the inliers")
    targets = np.empty((anchors.size, pls.num_clusters), dtype=np.float64)
    for r, i in enumerate(anchors):
        y = one_hot(pls, int(i))
        nbrs = neighborhood(g, int(i), cfg.rho, inliers)
        if nbrs.size == 0:
            targets[r] = y
            continue
        w = neighbor_weights(g, nbrs, int(i), cfg.strategy, cfg.tau_d)
        targets[r] = refine_label(y, bank.student[nbrs], w, cfg.alpha)
    return RefinedLabelMatrix(
        targets=targets, indices=anchors, alpha=cfg.alpha, rho=cfg.rho,
        strategy=cfg.strategy, tau_d=cfg.tau_d,
    )
