"""Unsupervised person re-identification from 3D skeleton sequences.

Hierarchical meta-prototype contrastive learning with hard skeleton mining:
sequences are represented at joint, component, and limb level, encoded by
small MLPs, clustered with DBSCAN into prototypes, and trained by contrasting
head-transformed instances against head-transformed prototypes with
per-frame hardness weighting. Evaluation matches probe against gallery
embeddings with CMC and mAP.
"""

from .io import (
    DatasetSplit,
    SkeletonSequence,
    generate_synthetic,
    make_split,
    parse_sequences,
    window_sequences,
    write_sequences,
)
from .hierarchy import PartitionTable, build_hierarchy, builtin_partitions
from .clustering import compute_prototypes, dbscan, suggest_eps
from .losses import (
    MetaBatch,
    frame_certainty,
    frame_importance,
    himpc_h_loss,
    himpc_loss,
    meta_transform,
    predict_cluster,
    temperature,
)
from .nn import AdamState, ModelParams, adam_step, encode_frame, grad_check, init_params, tap
from .trainer import TrainConfig, TrainLog, train
from .evaluate import EvalReport, build_msmr, match
from .estimator import SkeletonReidEncoder

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "DatasetSplit",
    "EvalReport",
    "MetaBatch",
    "ModelParams",
    "PartitionTable",
    "SkeletonReidEncoder",
    "SkeletonSequence",
    "TrainConfig",
    "TrainLog",
    "adam_step",
    "build_hierarchy",
    "build_msmr",
    "builtin_partitions",
    "compute_prototypes",
    "dbscan",
    "encode_frame",
    "frame_certainty",
    "frame_importance",
    "generate_synthetic",
    "grad_check",
    "himpc_h_loss",
    "himpc_loss",
    "init_params",
    "make_split",
    "match",
    "meta_transform",
    "parse_sequences",
    "predict_cluster",
    "suggest_eps",
    "tap",
    "temperature",
    "train",
    "window_sequences",
    "write_sequences",
]
