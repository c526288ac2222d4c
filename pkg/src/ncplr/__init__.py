"""Desk-scale laboratory for refining clustering pseudo-labels with
neighbour consistency: clustering-based pseudo labels over a k-reciprocal
Jaccard affinity graph, memory-bank contrastive training of a small encoder
under a mean-teacher pair, soft-label refinement, and a neighbour-consistency
KL regularizer, plus retrieval-style evaluation."""

__version__ = "0.1.0"

from .clustering import PseudoLabelSet, dbscan, init_memory_bank, one_hot
from .data import (
    FeatureSet,
    SyntheticSpec,
    generate_synthetic,
    load_features,
    save_features,
)
from .errors import (
    ConfigError,
    FormatError,
    NcplrError,
    NumericError,
    StalenessError,
    UsageError,
)
from .evaluation import EvalReport, cluster_quality, cmc_map, noise_rate, split_query_gallery
from .graph import (
    AffinityGraph,
    NeighborLists,
    ReciprocalSets,
    build_affinity_graph,
    compute_knn,
    jaccard_distance,
    neighborhood,
    reciprocal_sets,
)
from .losses import (
    LossConfig,
    LossValue,
    MemoryBank,
    cross_entropy,
    info_nce,
    memory_update,
    ncr_loss,
    total_loss,
)
from .model import (
    EncoderModel,
    TeacherStudentPair,
    embed_features,
    ema_update,
    forward,
    init_encoder,
    load_model,
    save_model,
)
from .refinement import (
    PredictionBank,
    RefineConfig,
    RefinedLabelMatrix,
    init_prediction_bank,
    neighbor_weights,
    refine_all,
    refine_label,
)
from .trainer import EpochReport, TrainConfig, TrainState, pk_sample, run_epoch, train, write_history

__all__ = [
    "AffinityGraph",
    "ConfigError",
    "EncoderModel",
    "EpochReport",
    "EvalReport",
    "FeatureSet",
    "FormatError",
    "LossConfig",
    "LossValue",
    "MemoryBank",
    "NcplrError",
    "NeighborLists",
    "NumericError",
    "PredictionBank",
    "PseudoLabelSet",
    "ReciprocalSets",
    "RefineConfig",
    "RefinedLabelMatrix",
    "StalenessError",
    "SyntheticSpec",
    "TeacherStudentPair",
    "TrainConfig",
    "TrainState",
    "UsageError",
    "build_affinity_graph",
    "cluster_quality",
    "cmc_map",
    "compute_knn",
    "cross_entropy",
    "dbscan",
    "embed_features",
    "ema_update",
    "forward",
    "generate_synthetic",
    "info_nce",
    "init_encoder",
    "init_memory_bank",
    "init_prediction_bank",
    "jaccard_distance",
    "load_features",
    "load_model",
    "memory_update",
    "ncr_loss",
    "neighbor_weights",
    "neighborhood",
    "noise_rate",
    "one_hot",
    "pk_sample",
    "reciprocal_sets",
    "refine_all",
    "refine_label",
    "run_epoch",
    "save_features",
    "save_model",
    "split_query_gallery",
    "total_loss",
    "train",
    "write_history",
]
