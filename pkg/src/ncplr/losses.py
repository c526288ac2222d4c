"""Training objectives with analytic gradients.

Three terms feed the combined objective: a memory-bank InfoNCE over cluster
centroids, a soft-target cross-entropy against refined labels, and a
neighbour-consistency KL between each teacher prediction and the mean of its
neighbours' student predictions. Everything is plain numpy; gradients are
closed-form and checked against finite differences in the test suite.

Gradient containers are keyed by tensor role:

    cross_entropy -> "logits"          (pre-softmax scores)
    info_nce      -> "embeddings"      (the input rows, unconstrained)
    ncr_loss      -> "student_logits"  (pre-softmax, via the softmax Jacobian)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, StalenessError, UsageError

EPS = 1e-12


@dataclass
class MemoryBank:
    """Per-cluster centroids for the InfoNCE term, momentum-updated.

    Rows stay unit-norm: every update re-normalizes, since the loss reads
    inner products as cosine similarities.
    """

    centroids: np.ndarray  # (K, d) float64, unit rows
    gamma: float = 0.9
    tau: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        norms = np.linalg.norm(self.centroids, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise NumericError("bank rows must be unit-norm within 1e-6")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau: float = 0.05
    tau_d: float = 0.05

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be nonnegative")
        if self.tau <= 0 or self.tau_d <= 0:
            raise ConfigError("tau and tau_d must be positive")


@dataclass(frozen=True)
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericError(f"loss value is not finite: {self.value}")


def _check_2d_pair(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise UsageError(f"{what}: shapes {a.shape} and {b.shape} must match and be 2-D")


def cross_entropy(preds: np.ndarray, targets: np.ndarray) -> LossValue:
    """Soft-target cross-entropy, averaged over the batch.

    value = -(1/B) sum_i sum_k targets[i,k] * log preds[i,k]
    grad (wrt pre-softmax logits) = (preds - targets) / B
    """
    _check_2d_pair(preds, targets, "cross_entropy")
    b = preds.shape[0]
    value = -float(np.sum(targets * np.log(np.maximum(preds, EPS)))) / b
    return LossValue(value=value, grads={"logits": (preds - targets) / b})


def info_nce(embeddings: np.ndarray, labels: np.ndarray, bank: MemoryBank) -> LossValue:
    """Contrastive loss of each embedding against its cluster centroid.

    value = -(1/B) sum_i log softmax(f_i . C^T / tau)[y_i]
    grad wrt the embedding rows: (softmax-weighted centroid sum minus the
    positive centroid) / (B * tau). The bank itself receives no gradient;
    it moves only through memory_update.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise UsageError(
            f"info_nce: embeddings {embeddings.shape} vs labels {labels.shape}"
        )
    if embeddings.shape[1] != bank.centroids.shape[1]:
        raise UsageError("info_nce: embedding dim does not match bank dim")
    if labels.size and labels.min() < 0:
        raise UsageError(f"info_nce: negative label {labels.min()}")
    if labels.size and labels.max() >= bank.k:
        raise StalenessError(
            f"label {labels.max()} out of range for bank with K={bank.k}"
        )
    b = embeddings.shape[0]
    logits = embeddings @ bank.centroids.T / bank.tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    value = float(np.mean(lse - logits[np.arange(b), labels]))
    soft = np.exp(logits - lse[:, None])
    grad = (soft @ bank.centroids - bank.centroids[labels]) / (b * bank.tau)
    return LossValue(value=value, grads={"embeddings": grad})


def memory_update(bank: MemoryBank, f: np.ndarray, label: int) -> None:
    """c_y <- gamma * c_y + (1 - gamma) * f, then re-normalize the row.

    Mutates the bank in place. Callers apply updates in batch iteration
    order; the op itself is sequential by contract.
    """
    if not 0 <= label < bank.k:
        raise UsageError(f"label {label} out of range for bank with K={bank.k}")
    if f.shape != (bank.centroids.shape[1],):
        raise UsageError(f"memory_update: vector shape {f.shape} does not match bank")
    row = bank.gamma * bank.centroids[label] + (1.0 - bank.gamma) * f
    norm = np.linalg.norm(row)
    if norm < EPS:
        raise NumericError(f"memory_update drove centroid {label} to zero norm")
    bank.centroids[label] = row / norm


def _check_simplex(rows: np.ndarray, what: str) -> None:
    if rows.ndim != 2:
        raise UsageError(f"{what}: expected 2-D simplex rows, got shape {rows.shape}")
    if rows.size == 0:
        return
    if rows.min() < -1e-9 or not np.allclose(rows.sum(axis=1), 1.0, atol=1e-6):
        raise UsageError(f"{what}: rows must lie on the probability simplex")


def ncr_loss(
    teacher_preds: np.ndarray,
    student_preds: np.ndarray,
    neighbor_indices: list[np.ndarray],
) -> LossValue:
    """Neighbour-consistency KL term.

    For each anchor i with a nonempty neighbour list,
    KL(teacher_preds[i] || mean_j student_preds[j]); the result is averaged
    over anchors that actually have neighbours. Isolated anchors contribute
    nothing and do not inflate the denominator.

    The teacher side is a constant. The returned gradient is wrt the
    student pre-softmax logits, obtained from dKL/dq = -p/q chain-ruled
    through the neighbour mean and each row's softmax Jacobian
    (dL/dz = p * (g - g.p) for g = dL/dp).
    """
    _check_simplex(teacher_preds, "ncr_loss: teacher")
    _check_simplex(student_preds, "ncr_loss: student")
    if teacher_preds.shape[0] != len(neighbor_indices):
        raise UsageError(
            f"ncr_loss: {teacher_preds.shape[0]} anchors vs "
            f"{len(neighbor_indices)} neighbour lists"
        )
    if teacher_preds.size and student_preds.size and (
        teacher_preds.shape[1] != student_preds.shape[1]
    ):
        raise UsageError("ncr_loss: teacher and student K differ")

    grad_preds = np.zeros_like(student_preds)
    total = 0.0
    n_eff = 0
    for i, nbrs in enumerate(neighbor_indices):
        nbrs = np.asarray(nbrs, dtype=np.int64)
        if nbrs.size == 0:
            continue
        n_eff += 1
        p = teacher_preds[i]
        q = np.maximum(student_preds[nbrs].mean(axis=0), EPS)
        pos = p > 0
        total += float(np.sum(p[pos] * (np.log(p[pos]) - np.log(q[pos]))))
        grad_preds[nbrs] += (-p / q) / nbrs.size
    if n_eff == 0:
        return LossValue(value=0.0, grads={"student_logits": np.zeros_like(student_preds)})
    total /= n_eff
    grad_preds /= n_eff
    # softmax Jacobian: rows of student_preds are softmax outputs
    inner = np.sum(grad_preds * student_preds, axis=1, keepdims=True)
    grad_logits = student_preds * (grad_preds - inner)
    return LossValue(value=total, grads={"student_logits": grad_logits})


def total_loss(cc: LossValue, ce: LossValue, ncr: LossValue, cfg: LossConfig) -> LossValue:
    """Weighted sum: cc + lambda1 * ce + lambda2 * ncr, gradients included."""
    value = cc.value + cfg.lambda1 * ce.value + cfg.lambda2 * ncr.value
    grads: dict[str, np.ndarray] = {}
    for part, weight in ((cc, 1.0), (ce, cfg.lambda1), (ncr, cfg.lambda2)):
        for key, g in part.grads.items():
            if key in grads:
                grads[key] = grads[key] + weight * g
            else:
                grads[key] = weight * g
    return LossValue(value=value, grads=grads)
