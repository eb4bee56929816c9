"""Meta-prototype contrastive objectives with hard-frame mining.

Instances (sequence embeddings) and cluster prototypes are mapped through
learnable square heads into parallel contrastive subspaces; the loss pulls
each transformed instance toward its own transformed prototype against the
others via a temperature-scaled softmax. The hardness-weighted variant scores
every frame: frames of a correctly self-predicted sequence are weighted
toward the LEAST prototype-similar one (hard positive), frames of a
mispredicted sequence toward the MOST similar one (hard negative).

Prototypes enter as constants (they are recomputed from scratch each epoch);
gradients flow through the head transforms and the encoder only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Array = np.ndarray


def temperature(h: int) -> float:
    """Similarity scale: sqrt of the embedding size."""
    if h < 1:
        raise ValueError("embedding size must be positive")
    return float(np.sqrt(h))


def meta_transform(head: Array, vectors: Array) -> Array:
    """Apply one head to row vectors: (..., h) -> (..., h).

    In homogeneous mode the same matrix transforms instances, frame
    features, and prototypes.
    """
    head = np.asarray(head, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64)
    if head.ndim != 2 or vectors.shape[-1] != head.shape[1]:
        raise ValueError(
            f"head {head.shape} cannot transform vectors with trailing dim {vectors.shape[-1]}"
        )
    return vectors @ head.T


def predict_cluster(meta_instance: Array, meta_prototypes: Array) -> int:
    """argmax_c of dot(instance, prototype_c); ties -> lowest index."""
    scores = np.asarray(meta_prototypes) @ np.asarray(meta_instance)
    return int(np.argmax(scores))


def predict_clusters(meta_instances: Array, meta_prototypes: Array) -> Array:
    """Row-wise predict_cluster for a (B, h) instance matrix."""
    return np.argmax(meta_instances @ meta_prototypes.T, axis=1)


def _frame_softmax(dots: Array) -> Array:
    shifted = dots - dots.max()
    e = np.exp(shifted)
    return e / e.sum()


def frame_certainty(frame_feats: Array, predicted_proto: Array) -> Array:
    """Softmax over frames of each frame's dot with the predicted prototype."""
    frame_feats = np.asarray(frame_feats, dtype=np.float64)
    if frame_feats.ndim != 2 or frame_feats.shape[0] < 1:
        raise ValueError("frame_feats must be a non-empty (F, h) matrix")
    return _frame_softmax(frame_feats @ np.asarray(predicted_proto))


def frame_importance(
    frame_feats: Array,
    predicted_proto: Array,
    predicted_label: int,
    cluster_label: int,
) -> Array:
    """Hardness weights per frame: sign-flipped certainty softmax.

    When the prediction matches the cluster label the sign is -1, so the
    least similar frame (hard positive) gets the largest weight; on a wrong
    prediction the sign is +1 and the most similar frame (hard negative)
    dominates. Output is strictly positive and sums to 1.
    """
    frame_feats = np.asarray(frame_feats, dtype=np.float64)
    if frame_feats.ndim != 2 or frame_feats.shape[0] < 1:
        raise ValueError("frame_feats must be a non-empty (F, h) matrix")
    sign = -1.0 if predicted_label == cluster_label else 1.0
    return _frame_softmax(sign * (frame_feats @ np.asarray(predicted_proto)))


# ---------------------------------------------------------------------------
# Batched structures
# ---------------------------------------------------------------------------

@dataclass
class LevelBatch:
    """One level's slice of a training batch.

    ``frame_feats`` (B, F, h) and ``instances`` (B, h) are tape tensors;
    ``prototypes`` (C, h) and ``labels`` (B,) are constants for the epoch.
    ``heads`` transform instances and frame features; ``proto_heads``
    transform prototypes (the same objects in homogeneous mode).
    """

    frame_feats: Tensor
    instances: Tensor
    prototypes: Array
    labels: Array
    heads: list[Tensor]
    proto_heads: list[Tensor]

    @property
    def batch_size(self) -> int:
        return self.instances.shape[0]

    @property
    def n_heads(self) -> int:
        return len(self.heads)


@dataclass
class MetaBatch:
    """Per-level batches plus the shared softmax temperature."""

    levels: list[LevelBatch]
    tau: float

    def __post_init__(self):
        if not self.levels:
            raise ValueError("batch must contain at least one level")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        sizes = {lvl.batch_size for lvl in self.levels}
        if len(sizes) != 1:
            raise ValueError("all levels must share the same batch size")
        for lvl in self.levels:
            if np.any(lvl.labels < 0):
                raise ValueError("batch contains an outlier sequence (label -1)")

    @property
    def batch_size(self) -> int:
        return self.levels[0].batch_size


@dataclass
class ImportanceWeights:
    """Per-level frame hardness weights (B, M, F) and predictions (B, M)."""

    weights: list[Array] = field(default_factory=list)
    predictions: list[Array] = field(default_factory=list)

    def validate(self, atol: float = 1e-12) -> None:
        for w in self.weights:
            if np.any(w <= 0):
                raise AssertionError("importance weights must be strictly positive")
            if not np.allclose(w.sum(axis=-1), 1.0, atol=atol):
                raise AssertionError("importance weights must sum to 1 per (sequence, head)")


def compute_importance(batch: MetaBatch) -> ImportanceWeights:
    """Hardness weights for every (level, sequence, head) in the batch.

    Pure numpy on the current tensor values, so the weights act as constants
    in the loss unless the differentiable path is requested there.
    """
    out = ImportanceWeights()
    for lvl in batch.levels:
        b, f = lvl.frame_feats.shape[:2]
        weights = np.empty((b, lvl.n_heads, f))
        preds = np.empty((b, lvl.n_heads), dtype=np.int64)
        for m, (head, proto_head) in enumerate(zip(lvl.heads, lvl.proto_heads)):
            inst_t = lvl.instances.data @ head.data.T
            feats_t = lvl.frame_feats.data @ head.data.T
            protos_t = lvl.prototypes @ proto_head.data.T
            pred = predict_clusters(inst_t, protos_t)
            preds[:, m] = pred
            sign = np.where(pred == lvl.labels, -1.0, 1.0)
            dots = np.einsum("bfh,bh->bf", feats_t, protos_t[pred])
            signed = sign[:, None] * dots
            shifted = signed - signed.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            weights[:, m, :] = e / e.sum(axis=1, keepdims=True)
        out.weights.append(weights)
        out.predictions.append(preds)
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def himpc_loss(batch: MetaBatch) -> Tensor:
    """Instance-vs-prototype contrast, averaged over level x instance x head.

    Each term is -log softmax over prototypes of the scaled dot between the
    transformed instance and its own transformed prototype. A single-cluster
    level contributes exactly zero.
    """
    total: Tensor | None = None
    n_terms = 0
    for lvl in batch.levels:
        protos = ad.constant(lvl.prototypes)
        for head, proto_head in zip(lvl.heads, lvl.proto_heads):
            inst_t = ad.matmul(lvl.instances, ad.transpose(head))
            protos_t = ad.matmul(protos, ad.transpose(proto_head))
            logits = ad.scale(ad.matmul(inst_t, ad.transpose(protos_t)), 1.0 / batch.tau)
            ce = ad.neg_log_softmax_at(logits, lvl.labels)
            term = ad.sum_(ce)
            total = term if total is None else total + term
            n_terms += lvl.batch_size
    return ad.scale(total, 1.0 / n_terms)


def himpc_h_loss(
    batch: MetaBatch,
    weights: ImportanceWeights | None = None,
    weight_grad: bool = False,
) -> Tensor:
    """Hardness-weighted frame-level contrast.

    Every frame contributes its own prototype-softmax term, mixed by the
    frame's importance weight; the frame sum is averaged over
    level x sequence x head (weights already sum to one over frames).
    ``weight_grad=False`` (default) treats the weights as constants;
    ``weight_grad=True`` routes the importance softmax through the tape,
    recomputing it from the current graph (``weights`` is then ignored).
    """
    if weights is None and not weight_grad:
        weights = compute_importance(batch)
    total: Tensor | None = None
    n_terms = 0
    for li, lvl in enumerate(batch.levels):
        b, f = lvl.frame_feats.shape[:2]
        labels_bf = np.broadcast_to(lvl.labels[:, None], (b, f))
        protos = ad.constant(lvl.prototypes)
        for m, (head, proto_head) in enumerate(zip(lvl.heads, lvl.proto_heads)):
            feats_t = ad.matmul(lvl.frame_feats, ad.transpose(head))
            protos_t = ad.matmul(protos, ad.transpose(proto_head))
            logits = ad.scale(ad.matmul(feats_t, ad.transpose(protos_t)), 1.0 / batch.tau)
            ce = ad.neg_log_softmax_at(logits, labels_bf)
            if weight_grad:
                inst_t = ad.matmul(lvl.instances, ad.transpose(head))
                pred = predict_clusters(inst_t.data, protos_t.data)
                sign = np.where(pred == lvl.labels, -1.0, 1.0)
                proto_sel = ad.reshape(ad.take_rows(protos_t, pred), (b, 1, lvl.prototypes.shape[1]))
                dots = ad.sum_(feats_t * proto_sel, axis=2)
                w = ad.softmax(dots * ad.constant(sign[:, None]), axis=1)
            else:
                w = ad.constant(weights.weights[li][:, m, :])
            term = ad.sum_(w * ce)
            total = term if total is None else total + term
            n_terms += b
    return ad.scale(total, 1.0 / n_terms)
