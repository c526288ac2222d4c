"""The epoch-alternating training loop.

Each epoch: embed the whole dataset with the previous epoch's student,
build the Jaccard affinity graph, cluster with DBSCAN, initialize the
memory bank (cluster means) and the prediction bank (one-hot labels),
then run PK-sampled steps. A step perturbs the batch twice with Gaussian
noise, runs student and teacher forwards, refreshes the prediction bank,
refines the batch labels, combines the contrastive, cross-entropy and
neighbour-consistency terms, takes one gradient-descent step, momentum-
updates the bank centroids and EMA-updates the teacher.

The lambda2 weight and the EMA momentum both ramp linearly from zero over
the warmup fraction of training; the learning rate steps down by 10x at
each third of the run.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import PseudoLabelSet, dbscan, init_memory_bank, write_clusters_csv
from .data import FeatureSet
from .errors import ConfigError
from .evaluation import cluster_quality, noise_rate
from .graph import build_affinity_graph, neighborhood
from .losses import LossConfig, LossValue, cross_entropy, info_nce, memory_update, ncr_loss, total_loss
from .model import (
    TeacherStudentPair,
    backward,
    ema_update,
    forward,
    init_encoder,
    set_classifier,
    sgd_step,
)
from .refinement import RefineConfig, init_prediction_bank, refine_all

log = logging.getLogger(__name__)

NCR_MODES = ("off", "one_stream", "two_stream")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    steps_per_epoch: int = 4
    P: int = 16
    K_inst: int = 16
    learning_rate: float = 0.5
    eps_dbscan: float = 0.6
    min_samples: int = 4
    kappa: int = 30
    rho: float = 0.2
    alpha: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 1.0
    warmup_frac: float = 50.0 / 60.0  # fraction of epochs over which ramps run
    ema_momentum: float = 0.99        # ramp target
    gamma: float = 0.9
    tau: float = 0.05
    tau_d: float = 0.05
    aug_std: float = 0.05
    seed: int = 0
    hidden_dim: int = 0  # 0 = 2 * input dim
    embed_dim: int = 0   # 0 = input dim
    use_refined_ce: bool = True
    use_distance_weight: bool = True
    ncr_mode: str = "two_stream"

    def __post_init__(self):
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.P < 1 or self.K_inst < 1:
            raise ConfigError("P and K_inst must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.warmup_frac <= 1.0:
            raise ConfigError("warmup_frac must be in (0, 1]")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must be in [0, 1]")
        if self.aug_std < 0:
            raise ConfigError("aug_std must be >= 0")
        if self.ncr_mode not in NCR_MODES:
            raise ConfigError(f"ncr_mode must be one of {NCR_MODES}, got {self.ncr_mode!r}")
        # remaining fields are validated by the configs they feed
        RefineConfig(alpha=self.alpha, rho=self.rho, tau_d=self.tau_d,
                     strategy="distance-softmax" if self.use_distance_weight else "average")
        LossConfig(lambda1=self.lambda1, lambda2=self.lambda2, tau=self.tau, tau_d=self.tau_d)

    @property
    def batch_size(self) -> int:
        return self.P * self.K_inst

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            alpha=self.alpha, rho=self.rho, tau_d=self.tau_d,
            strategy="distance-softmax" if self.use_distance_weight else "average",
        )


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    k: int
    n_clustered: int
    loss_cc: float
    loss_ce: float
    loss_ncr: float
    ari: float | None
    nmi: float | None
    noise_rate: float | None
    skipped: bool = False


@dataclass
class TrainState:
    pair: TeacherStudentPair
    data: FeatureSet
    rng: np.random.Generator
    epoch: int = 0
    dump_clusters_dir: Path | None = None
    dump_refined_dir: Path | None = None


def warm_epochs(cfg: TrainConfig) -> int:
    return max(1, round(cfg.warmup_frac * cfg.epochs))


def schedule(cfg: TrainConfig, epoch: int) -> tuple[float, float, float]:
    """(learning rate, lambda2, ema momentum) in force during `epoch`."""
    decay_every = max(1, round(cfg.epochs / 3))
    lr = cfg.learning_rate * 0.1 ** (epoch // decay_every)
    ramp = min(1.0, epoch / warm_epochs(cfg))
    return lr, cfg.lambda2 * ramp, cfg.ema_momentum * ramp


def pk_sample(pls: PseudoLabelSet, p: int, k_inst: int, rng: np.random.Generator) -> np.ndarray:
    """P distinct cluster ids uniformly, K_inst members each; members are
    drawn without replacement unless the cluster is too small."""
    if p > pls.num_clusters:
        raise ConfigError(f"P={p} exceeds cluster count K={pls.num_clusters}")
    if p < 1 or k_inst < 1:
        raise ConfigError("P and K_inst must be >= 1")
    chosen = rng.choice(pls.num_clusters, size=p, replace=False)
    parts = []
    for c in chosen:
        members = np.flatnonzero(pls.assignment == c)
        parts.append(rng.choice(members, size=k_inst, replace=members.size < k_inst))
    return np.concatenate(parts).astype(np.int64)


def _skip_report(epoch: int, k: int, n_clustered: int) -> EpochReport:
    return EpochReport(epoch=epoch, k=k, n_clustered=n_clustered,
                       loss_cc=0.0, loss_ce=0.0, loss_ncr=0.0,
                       ari=None, nmi=None, noise_rate=None, skipped=True)


def _one_hot_rows(pls: PseudoLabelSet, rows: np.ndarray) -> np.ndarray:
    out = np.zeros((rows.size, pls.num_clusters), dtype=np.float64)
    out[np.arange(rows.size), pls.assignment[rows]] = 1.0
    return out


def run_epoch(state: TrainState, cfg: TrainConfig) -> EpochReport:
    """One clustering stage plus one training stage; returns the report."""
    epoch = state.epoch
    lr, lambda2_now, ema_now = schedule(cfg, epoch)
    data, pair, rng = state.data, state.pair, state.rng

    # clustering stage, on features from the previous epoch's student
    feats = forward(pair.student, data.features).embeddings
    fs_prev = FeatureSet(features=feats, true_ids=data.true_ids, cam_ids=data.cam_ids)
    kappa = min(cfg.kappa, data.n)
    g = build_affinity_graph(fs_prev, kappa)
    pls = dbscan(g, cfg.eps_dbscan, cfg.min_samples)
    state.epoch += 1
    if state.dump_clusters_dir is not None:
        write_clusters_csv(pls, state.dump_clusters_dir / f"clusters_epoch{epoch:03d}.csv")
    if pls.num_clusters == 0:
        log.warning("epoch %d: no clusters found, skipping training stage", epoch)
        return _skip_report(epoch, 0, 0)

    mbank = init_memory_bank(fs_prev, pls, gamma=cfg.gamma, tau=cfg.tau)
    pbank = init_prediction_bank(pls)
    set_classifier(pair.student, mbank.centroids, cfg.tau)
    set_classifier(pair.teacher, mbank.centroids, cfg.tau)
    pair.ema_momentum = ema_now

    inliers = pls.inliers
    p_eff = min(cfg.P, pls.num_clusters)
    loss_cfg = LossConfig(lambda1=cfg.lambda1, lambda2=lambda2_now, tau=cfg.tau, tau_d=cfg.tau_d)
    refine_cfg = cfg.refine_config()
    b = p_eff * cfg.K_inst
    sums = np.zeros(3)

    for step in range(cfg.steps_per_epoch):
        batch = pk_sample(pls, p_eff, cfg.K_inst, rng)
        x = data.features[batch]
        view1 = x + rng.standard_normal(x.shape) * cfg.aug_std
        view2 = x + rng.standard_normal(x.shape) * cfg.aug_std
        s_out = forward(pair.student, view1)
        t_out = forward(pair.teacher, view2)
        pbank.update(batch, s_out.preds, t_out.preds,
                     stamp=epoch * cfg.steps_per_epoch + step + 1)

        if cfg.use_refined_ce:
            targets = refine_all(pls, pbank, g, refine_cfg, rows=batch).targets
        else:
            targets = _one_hot_rows(pls, batch)

        cc = info_nce(s_out.embeddings, pls.assignment[batch], mbank)
        ce = cross_entropy(s_out.preds, targets)
        if cfg.ncr_mode != "off" and lambda2_now > 0.0:
            anchors = t_out.preds if cfg.ncr_mode == "two_stream" else s_out.preds
            pool, lists = _ncr_pool(g, pls, pbank, batch, s_out.preds, cfg.rho, inliers)
            ncr = ncr_loss(anchors, pool, lists)
        else:
            ncr = LossValue(value=0.0, grads={})
        total = total_loss(cc, ce, ncr, loss_cfg)

        d_logits = total.grads.get("logits")
        if "student_logits" in total.grads:
            extra = total.grads["student_logits"][:b]
            d_logits = extra if d_logits is None else d_logits + extra
        grads = backward(pair.student, s_out, total.grads.get("embeddings"), d_logits)
        sgd_step(pair.student, grads, lr)
        for i, row in enumerate(batch):
            memory_update(mbank, s_out.embeddings[i], int(pls.assignment[row]))
        ema_update(pair)
        sums += (cc.value, ce.value, ncr.value)

    if state.dump_refined_dir is not None:
        refined = refine_all(pls, pbank, g, refine_cfg)
        write_refined_csv(
            pls, refined, state.dump_refined_dir / f"refined_epoch{epoch:03d}.csv"
        )

    quality = cluster_quality(pls, data.true_ids) if data.true_ids is not None else None
    nr = noise_rate(pls.assignment, pls, data.true_ids) if data.true_ids is not None else None
    means = sums / cfg.steps_per_epoch
    return EpochReport(
        epoch=epoch, k=pls.num_clusters, n_clustered=pls.n_clustered,
        loss_cc=float(means[0]), loss_ce=float(means[1]), loss_ncr=float(means[2]),
        ari=quality[0] if quality else None,
        nmi=quality[1] if quality else None,
        noise_rate=nr,
    )


def _ncr_pool(
    g,
    pls: PseudoLabelSet,
    pbank,
    batch: np.ndarray,
    live_preds: np.ndarray,
    rho: float,
    inliers: np.ndarray,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Neighbour predictions for the consistency term.

    Gradients must reach in-batch neighbours, so those map to the live
    student rows; out-of-batch neighbours come from the bank as constants,
    stacked after the batch rows.
    """
    b = batch.size
    first_pos: dict[int, int] = {}
    for pos, idx in enumerate(batch):
        first_pos.setdefault(int(idx), pos)
    extras: list[int] = []
    extra_pos: dict[int, int] = {}
    lists: list[np.ndarray] = []
    for idx in batch:
        nbrs = neighborhood(g, int(idx), rho, inliers)
        mapped = np.empty(nbrs.size, dtype=np.int64)
        for t, j in enumerate(nbrs):
            j = int(j)
            if j in first_pos:
                mapped[t] = first_pos[j]
            else:
                if j not in extra_pos:
                    extra_pos[j] = b + len(extras)
                    extras.append(j)
                mapped[t] = extra_pos[j]
        lists.append(mapped)
    if extras:
        pool = np.vstack([live_preds, pbank.student[np.array(extras, dtype=np.int64)]])
    else:
        pool = live_preds
    return pool, lists


def refined_entropy(rows: np.ndarray) -> np.ndarray:
    """Shannon entropy per simplex row, with 0 * log 0 = 0."""
    safe = np.where(rows > 0, rows, 1.0)
    return -(rows * np.log(safe)).sum(axis=1) + 0.0


def write_refined_csv(pls: PseudoLabelSet, refined, path: Path) -> None:
    ent = refined_entropy(refined.targets)
    arg = refined.targets.argmax(axis=1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "hard_label", "refined_argmax", "refined_entropy"])
        for r, i in enumerate(refined.indices):
            writer.writerow([int(i), int(pls.assignment[i]), int(arg[r]), repr(float(ent[r]))])


def train(
    cfg: TrainConfig,
    data: FeatureSet,
    dump_clusters_dir: str | Path | None = None,
    dump_refined_dir: str | Path | None = None,
) -> tuple[TeacherStudentPair, list[EpochReport]]:
    """Run the full loop; returns the models and the per-epoch history."""
    rng = np.random.default_rng(cfg.seed)
    hidden = cfg.hidden_dim or 2 * data.dim
    embed = cfg.embed_dim or data.dim
    student = init_encoder(data.dim, hidden, embed, k=1, rng=rng)
    pair = TeacherStudentPair(student=student, teacher=student.copy())
    state = TrainState(
        pair=pair, data=data, rng=rng,
        dump_clusters_dir=Path(dump_clusters_dir) if dump_clusters_dir else None,
        dump_refined_dir=Path(dump_refined_dir) if dump_refined_dir else None,
    )
    for d in (state.dump_clusters_dir, state.dump_refined_dir):
        if d is not None:
            d.mkdir(parents=True, exist_ok=True)
    history = [run_epoch(state, cfg) for _ in range(cfg.epochs)]
    return pair, history


HISTORY_COLUMNS = (
    "epoch", "K", "n_clustered", "loss_cc", "loss_ce", "loss_ncr",
    "ari", "nmi", "noise_rate",
)


def write_history(history: list[EpochReport], path: str | Path) -> None:
    """history.csv; metric cells are empty when ground truth was absent or
    the epoch was skipped."""

    def cell(v: float | None) -> str:
        return "" if v is None else repr(float(v))

    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for r in history:
            writer.writerow([
                r.epoch, r.k, r.n_clustered,
                cell(r.loss_cc), cell(r.loss_ce), cell(r.loss_ncr),
                cell(r.ari), cell(r.nmi), cell(r.noise_rate),
            ])
