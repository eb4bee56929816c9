"""Alternating train loop: encode -> cluster -> prototype -> contrast.

Each epoch re-encodes every training sequence per level, re-clusters the
instances with DBSCAN, freezes the resulting prototypes, then optimizes the
configured contrastive objective over shuffled mini-batches with Adam. The
loop stops at ``max_epoch`` or after ``max_patience`` epochs without
improving the epoch-mean loss. Deterministic for a fixed seed.

Labels never enter: ``train`` takes a bare (N, F, J, 3) coordinate array.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .clustering import cluster_levels
from .hierarchy import PartitionTable, build_hierarchy_batch, builtin_partitions
from .losses import LevelBatch, MetaBatch, himpc_h_loss, himpc_loss, temperature
from .nn import (
    AdamState,
    ModelParams,
    adam_step,
    collect_grads,
    init_params,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
    wrap_params,
)

logger = logging.getLogger(__name__)

Array = np.ndarray

LOSS_VARIANTS = ("himpc", "himpc_h", "dpc")


@dataclass
class TrainConfig:
    """All training hyperparameters; defaults follow the reference setup."""

    f: int = 6
    h: int = 256
    m_heads: int = 8
    eps: float = 0.6
    min_samples: int = 2
    lr: float = 0.00035
    batch_size: int = 256
    max_epoch: int = 300
    max_patience: int = 50
    seed: int = 0
    center_root: bool = False
    heterogeneous_heads: bool = False
    importance_stop_gradient: bool = True
    loss_variant: str = "himpc_h"
    l2_normalize: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        for name in ("f", "h", "m_heads", "min_samples", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("eps and lr must be positive")
        if self.max_epoch < 0 or self.max_patience < 1:
            raise ValueError("max_epoch must be >= 0 and max_patience >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "TrainConfig":
        """Flat ``key = value`` text file; later CLI overrides win."""
        values: dict = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ValueError(f"{path}:{line_no}: expected 'key = value'")
                key, raw = (part.strip() for part in text.split("=", 1))
                values[key] = _coerce(cls, key, raw, f"{path}:{line_no}")
        if overrides:
            values.update(overrides)
        return cls.from_dict(values)


def _coerce(cls, key: str, raw: str, where: str):
    for f in fields(cls):
        if f.name == key:
            if f.type in ("int", int):
                return int(raw)
            if f.type in ("float", float):
                return float(raw)
            if f.type in ("bool", bool):
                lowered = raw.lower()
                if lowered in ("true", "1", "yes", "on"):
                    return True
                if lowered in ("false", "0", "no", "off"):
                    return False
                raise ValueError(f"{where}: invalid boolean '{raw}' for {key}")
            return raw
    raise ValueError(f"{where}: unknown config key '{key}'")


@dataclass
class EpochStats:
    epoch: int
    loss: float | None
    clusters: list[int]
    outliers: list[int]
    pool_size: int
    wall_time: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None

    def canonical_dict(self) -> dict:
        """Deterministic view: wall-clock time is excluded on purpose."""
        return {
            "best_epoch": self.best_epoch,
            "epochs": [
                {
                    "epoch": e.epoch,
                    "loss": e.loss,
                    "clusters": e.clusters,
                    "outliers": e.outliers,
                    "pool_size": e.pool_size,
                }
                for e in self.epochs
            ],
        }

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))

    def full_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "epochs": [asdict(e) for e in self.epochs],
        }


# ---------------------------------------------------------------------------
# Forward construction shared by trainer, grad checks, and the CLI
# ---------------------------------------------------------------------------

def level_dims(j: int, variant: str, tables: tuple[PartitionTable, ...] | None = None) -> tuple[int, ...]:
    """Encoder input widths per level; the plain-prototype ablation trains
    the joint level only."""
    tables = tables or builtin_partitions(j)
    dims = tuple(3 * t.n_groups for t in tables)
    return dims[:1] if variant == "dpc" else dims


def create_params(j: int, config: TrainConfig, rng: np.random.Generator,
                  tables: tuple[PartitionTable, ...] | None = None) -> ModelParams:
    variant = config.loss_variant
    dims = level_dims(j, variant, tables)
    m_heads = 1 if variant == "dpc" else config.m_heads
    return init_params(
        dims,
        config.h,
        m_heads,
        rng,
        heterogeneous=config.heterogeneous_heads and variant != "dpc",
        identity_heads=variant == "dpc",
    )


def trainable_names(params: ModelParams, variant: str) -> set[str]:
    """The ablation's identity heads stay fixed; everything else trains."""
    if variant == "dpc":
        return {name for name in params.arrays if name.startswith("enc")}
    return set(params.arrays)


def build_meta_batch(
    params: ModelParams,
    tensors: dict[str, Tensor],
    reps: list[Array],
    prototypes: list[Array],
    labels: list[Array],
    tau: float,
) -> MetaBatch:
    """Encode per-level representations on the tape and bundle the batch."""
    levels = []
    for k in range(params.n_levels):
        level = k + 1
        frame_feats = mlp_forward(tensors, params, level, ad.constant(reps[k]))
        instances = ad.mean(frame_feats, axis=1)
        heads = [tensors[params.head_name(level, m)] for m in range(params.m_heads)]
        proto_heads = [
            tensors[params.head_name(level, m, prototype_side=True)]
            for m in range(params.m_heads)
        ]
        levels.append(
            LevelBatch(
                frame_feats=frame_feats,
                instances=instances,
                prototypes=prototypes[k],
                labels=labels[k],
                heads=heads,
                proto_heads=proto_heads,
            )
        )
    return MetaBatch(levels=levels, tau=tau)


def batch_loss(batch: MetaBatch, variant: str, importance_stop_gradient: bool = True) -> Tensor:
    if variant in ("himpc", "dpc"):
        return himpc_loss(batch)
    return himpc_h_loss(batch, weight_grad=not importance_stop_gradient)


def loss_variant_dpc(batch: MetaBatch) -> Tensor:
    """Plain prototype contrast: the base loss over an identity-head batch."""
    return himpc_loss(batch)


def make_loss_builder(
    reps: list[Array],
    prototypes: list[Array],
    labels: list[Array],
    tau: float,
    variant: str = "himpc_h",
    importance_stop_gradient: bool = True,
    trainable: set[str] | None = None,
):
    """A grad_check-compatible closure rebuilding the loss from params.

    With stop-gradient importance weights the backward pass differentiates
    the loss at fixed weights, so the closure freezes them at the first
    (unperturbed) call; finite-difference probes then see the same function
    the tape differentiates. The differentiable-weights ablation recomputes
    them every call.
    """
    from .losses import compute_importance

    frozen: dict = {}

    def loss_fn(params: ModelParams):
        tensors = wrap_params(params, trainable)
        batch = build_meta_batch(params, tensors, reps, prototypes, labels, tau)
        if variant in ("himpc", "dpc"):
            return himpc_loss(batch), tensors
        if not importance_stop_gradient:
            return himpc_h_loss(batch, weight_grad=True), tensors
        if "weights" not in frozen:
            frozen["weights"] = compute_importance(batch)
        return himpc_h_loss(batch, weights=frozen["weights"]), tensors

    return loss_fn


def tune_eps(
    coords: Array,
    config: TrainConfig,
    tables: tuple[PartitionTable, ...] | None = None,
    quantile: str = "q0.9",
    scale: float = 1.5,
) -> float:
    """Label-free DBSCAN radius from initial-encoding neighbour statistics.

    Encodes the training set with freshly initialized parameters, takes the
    per-level k-nearest-neighbour distance quantile (the same numbers the
    cluster-stats command reports), and returns scale x the largest level's
    value: comfortably above within-cluster spacing at every level while
    staying below between-cluster gaps on separable data.
    """
    from .clustering import suggest_eps

    coords = np.asarray(coords, dtype=np.float64)
    j = coords.shape[2]
    if config.center_root:
        coords = coords - coords[:, :, 0:1, :]
    all_tables = tables or builtin_partitions(j)
    params = create_params(j, config, np.random.default_rng(config.seed), all_tables)
    use_tables = all_tables[: params.n_levels]
    reps = build_hierarchy_batch(coords, use_tables)
    tensors = wrap_params(params, trainable=set())
    worst = 0.0
    for k in range(params.n_levels):
        feats = mlp_forward(tensors, params, k + 1, ad.constant(reps[k])).data
        suggestion = suggest_eps(feats.mean(axis=1), config.min_samples)
        worst = max(worst, suggestion[quantile])
    return scale * worst


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

def train(
    coords: Array,
    config: TrainConfig,
    tables: tuple[PartitionTable, ...] | None = None,
    checkpoint_path: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Fit encoders and heads on unlabeled sequences (N, F, J, 3).

    Per epoch: encode everything, cluster per level, discard outliers,
    freeze prototypes, then minibatch-optimize the configured loss. Writes a
    resumable checkpoint after every epoch when ``checkpoint_path`` is set;
    ``resume_from`` continues a previous run bit-exactly.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 4 or coords.shape[3] != 3:
        raise ValueError("training input must have shape (N, F, J, 3)")
    if coords.shape[0] < 1:
        raise ValueError("training set is empty")
    if coords.shape[1] != config.f:
        raise ValueError(
            f"sequences have length {coords.shape[1]} but config.f = {config.f}; window first"
        )
    n, _, j, _ = coords.shape
    variant = config.loss_variant
    all_tables = tables or builtin_partitions(j)
    use_tables = all_tables[:1] if variant == "dpc" else all_tables
    if config.center_root:
        coords = coords - coords[:, :, 0:1, :]
    reps = build_hierarchy_batch(coords, use_tables)
    tau = temperature(config.h)

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    params = create_params(j, config, init_rng, all_tables)
    trainable = trainable_names(params, variant)
    adam = AdamState.for_params(
        params, config.lr, trainable,
        beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
    )
    log = TrainLog()
    start_epoch = 0
    best_loss = np.inf
    patience = 0
    if resume_from is not None:
        snapshot = load_checkpoint(resume_from)
        params = snapshot["params"]
        adam = snapshot["adam"]
        shuffle_rng.bit_generator.state = snapshot["rng_state"]
        start_epoch = snapshot["epoch"]
        saved_best = snapshot["meta"].get("best_loss")
        best_loss = np.inf if saved_best is None else saved_best
        patience = snapshot["meta"].get("patience", 0)
        if snapshot["meta"].get("best_epoch") is not None:
            log.best_epoch = snapshot["meta"]["best_epoch"]
        trainable = trainable_names(params, variant)

    def write_checkpoint(epoch: int) -> None:
        if checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path, params, adam, shuffle_rng.bit_generator.state, epoch,
                meta={
                    "config": config.to_dict(),
                    "j": j,
                    "best_loss": best_loss if np.isfinite(best_loss) else None,
                    "patience": patience,
                    "best_epoch": log.best_epoch,
                },
            )

    degenerate_streak = 0
    for epoch in range(start_epoch + 1, config.max_epoch + 1):
        tic = time.perf_counter()
        level_instances = []
        tensors_eval = wrap_params(params, trainable=set())
        for k in range(params.n_levels):
            feats = mlp_forward(tensors_eval, params, k + 1, ad.constant(reps[k])).data
            level_instances.append(feats.mean(axis=1))
        state = cluster_levels(level_instances, config.eps, config.min_samples, config.l2_normalize)
        clusters = state.cluster_counts()
        outliers = state.outlier_counts()

        pool = np.arange(n)
        for labels in state.labels:
            pool = pool[labels[pool] != -1]
        if min(clusters) < 1 or pool.size == 0:
            degenerate_streak += 1
            logger.warning(
                "epoch %d: no usable clusters (C=%s, outliers=%s); skipping optimization",
                epoch, clusters, outliers,
            )
            log.epochs.append(EpochStats(epoch, None, clusters, outliers, 0,
                                         time.perf_counter() - tic))
            if degenerate_streak >= 3:
                raise RuntimeError(
                    "three consecutive all-outlier epochs; lower eps or check the data"
                )
            write_checkpoint(epoch)
            continue
        degenerate_streak = 0
        if max(clusters) == 1:
            logger.warning(
                "epoch %d: clustering collapsed to a single cluster per level; "
                "contrastive loss is zero; consider reducing eps", epoch,
            )

        order = pool[shuffle_rng.permutation(pool.size)]
        epoch_loss = 0.0
        for start in range(0, order.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            tensors = wrap_params(params, trainable)
            batch = build_meta_batch(
                params,
                tensors,
                [reps[k][idx] for k in range(params.n_levels)],
                [state.prototypes[k] for k in range(params.n_levels)],
                [state.labels[k][idx] for k in range(params.n_levels)],
                tau,
            )
            loss = batch_loss(batch, variant, config.importance_stop_gradient)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            adam_step(adam, params, collect_grads(tensors))
            epoch_loss += float(loss.data) * idx.size
        epoch_loss /= order.size

        log.epochs.append(EpochStats(epoch, epoch_loss, clusters, outliers, int(order.size),
                                     time.perf_counter() - tic))
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            log.best_epoch = epoch
            patience = 0
        else:
            patience += 1
        write_checkpoint(epoch)
        if patience >= config.max_patience:
            logger.info("epoch %d: stopping, no improvement for %d epochs", epoch, patience)
            break
    return params, log
