"""Retrieval metrics (mAP, CMC) with camera-aware filtering, plus
clustering-agreement metrics against ground-truth identities.

Retrieval follows the usual person-search protocol: rank the gallery by
descending cosine similarity, drop gallery entries that share BOTH the id
and the camera of the query (those are near-duplicate captures, and with a
shared feature file they include the query itself), then score average
precision and first-match ranks over what remains.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from .clustering import PseudoLabelSet
from .data import FeatureSet
from .errors import UsageError
from .refinement import RefinedLabelMatrix

CMC_RANKS = (1, 5, 10)


@dataclass(frozen=True)
class EvalReport:
    """Retrieval and/or clustering metrics; fields are None when the
    corresponding protocol was not run."""

    map: float | None = None
    cmc: tuple[float, float, float] | None = None  # ranks 1, 5, 10
    n_queries: int = 0
    n_excluded: int = 0  # queries with zero valid gallery matches
    ari: float | None = None
    nmi: float | None = None
    purity: float | None = None
    noise_rate: float | None = None


def cmc_map(query: FeatureSet, gallery: FeatureSet) -> EvalReport:
    """mAP and CMC at ranks 1/5/10 under the camera-aware protocol.

    Ranking ties are broken by ascending gallery index. AP for one query is
    the mean of precision-at-rank over the ranks holding true matches.
    Queries with no valid match after filtering are excluded from the
    averages and counted in n_excluded.
    """
    if query.true_ids is None or gallery.true_ids is None:
        raise UsageError("cmc_map needs true_ids on both query and gallery sets")
    use_cams = query.cam_ids is not None and gallery.cam_ids is not None
    g_order_base = np.arange(gallery.n)
    aps: list[float] = []
    hits = {r: 0 for r in CMC_RANKS}
    excluded = 0
    for qi in range(query.n):
        sims = gallery.features @ query.features[qi]
        order = np.lexsort((g_order_base, -sims))  # desc sim, index tie-break
        keep = np.ones(gallery.n, dtype=bool)
        if use_cams:
            keep = ~(
                (gallery.true_ids == query.true_ids[qi])
                & (gallery.cam_ids == query.cam_ids[qi])
            )
        ranked = order[keep[order]]
        matches = gallery.true_ids[ranked] == query.true_ids[qi]
        positions = np.flatnonzero(matches) + 1  # 1-based ranks
        if positions.size == 0:
            excluded += 1
            continue
        precision = np.arange(1, positions.size + 1) / positions
        aps.append(float(precision.mean()))
        first = positions[0]
        for r in CMC_RANKS:
            hits[r] += int(first <= r)
    n_valid = len(aps)
    if n_valid == 0:
        return EvalReport(map=0.0, cmc=(0.0, 0.0, 0.0), n_queries=query.n,
                          n_excluded=excluded)
    return EvalReport(
        map=float(np.mean(aps)),
        cmc=tuple(hits[r] / n_valid for r in CMC_RANKS),
        n_queries=query.n,
        n_excluded=excluded,
    )


def cluster_quality(
    pls: PseudoLabelSet, truth: np.ndarray
) -> tuple[float, float, float] | None:
    """(ARI, NMI, purity) over the inliers; None when nothing clustered."""
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape[0] != len(pls.assignment):
        raise UsageError("truth vector length does not match assignment")
    inl = pls.inliers
    if inl.size == 0:
        return None
    pred, true = pls.assignment[inl], truth[inl]
    ari = float(adjusted_rand_score(true, pred))
    nmi = float(normalized_mutual_info_score(true, pred, average_method="arithmetic"))
    correct = 0
    for c in range(pls.num_clusters):
        members = true[pred == c]
        if members.size:
            correct += int(np.bincount(members).max())
    return ari, nmi, correct / inl.size


def _majority_map(pls: PseudoLabelSet, truth: np.ndarray) -> np.ndarray:
    """Cluster id -> most common truth id among members; ties to the
    lowest truth id (bincount argmax picks it)."""
    mapped = np.zeros(pls.num_clusters, dtype=np.int64)
    inl = pls.inliers
    for c in range(pls.num_clusters):
        members = truth[inl[pls.assignment[inl] == c]]
        mapped[c] = int(np.bincount(members).argmax())
    return mapped


def noise_rate(
    labels: np.ndarray | RefinedLabelMatrix,
    pls: PseudoLabelSet,
    truth: np.ndarray,
) -> float:
    """Fraction of inliers whose label disagrees with truth after mapping
    clusters to truth ids by majority vote.

    `labels` is either a length-N integer vector of cluster ids (hard) or a
    RefinedLabelMatrix, in which case each row's argmax is scored.
    """
    truth = np.asarray(truth, dtype=np.int64)
    inl = pls.inliers
    if inl.size == 0:
        return 0.0
    mapped = _majority_map(pls, truth)
    if isinstance(labels, RefinedLabelMatrix):
        idx = labels.indices
        hard = labels.targets.argmax(axis=1)
        sel = np.isin(idx, inl)
        idx, hard = idx[sel], hard[sel]
    else:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape[0] != len(pls.assignment):
            raise UsageError("hard label vector must cover all N instances")
        idx, hard = inl, labels[inl]
    if idx.size == 0:
        return 0.0
    return float(np.mean(mapped[hard] != truth[idx]))


def split_query_gallery(fs: FeatureSet, query_cam: int = 0) -> tuple[FeatureSet, FeatureSet]:
    """Queries = instances seen by `query_cam`; gallery = everything.

    The camera filter inside cmc_map removes each query's own entry (and
    its same-camera duplicates) from its gallery ranking, so sharing one
    feature file between the two sides is safe.
    """
    if fs.cam_ids is None or fs.true_ids is None:
        raise UsageError("query/gallery split needs cam_ids and true_ids")
    idx = np.flatnonzero(fs.cam_ids == query_cam)
    if idx.size == 0:
        raise UsageError(f"no instances recorded by camera {query_cam}")
    query = FeatureSet(
        features=fs.features[idx],
        true_ids=fs.true_ids[idx],
        cam_ids=fs.cam_ids[idx],
    )
    return query, fs


def write_eval_json(report: EvalReport, path: str | Path, protocol: dict | None = None) -> None:
    payload = asdict(report)
    payload["cmc_ranks"] = list(CMC_RANKS)
    if protocol:
        payload["protocol"] = protocol
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
