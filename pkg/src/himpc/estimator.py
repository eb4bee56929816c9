"""Scikit-learn style front end: fit on unlabeled sequences, transform to embeddings.

The estimator wraps the full pipeline (hierarchy, encoders, clustering,
contrastive training, final representation) so it can sit in sklearn
pipelines and be scored with any off-the-shelf nearest-neighbour tooling.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .evaluate import build_msmr_batch
from .trainer import TrainConfig, train

Array = np.ndarray


def validate_sequences(X, f: int | None = None) -> Array:
    """Coerce input to a finite (N, F, J, 3) float64 stack.

    Accepts a 4-d array or a list of equal-shape (F, J, 3) arrays.
    """
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(seq, dtype=np.float64) for seq in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[3] != 3:
        raise ValueError("expected sequences of shape (N, F, J, 3)")
    if f is not None and X.shape[1] != f:
        raise ValueError(f"sequences have length {X.shape[1]}, expected {f}")
    if not np.all(np.isfinite(X)):
        raise ValueError("sequences contain non-finite coordinates")
    return X


class SkeletonReidEncoder(BaseEstimator, TransformerMixin):
    """Unsupervised skeleton-sequence embedder.

    ``fit`` trains the hierarchical contrastive model on unlabeled
    sequences; any ``y`` is ignored. ``transform`` maps sequences to
    embeddings suitable for Euclidean nearest-neighbour re-identification.
    """

    def __init__(
        self,
        f: int = 6,
        h: int = 256,
        m_heads: int = 8,
        eps: float = 0.6,
        min_samples: int = 2,
        lr: float = 0.00035,
        batch_size: int = 256,
        max_epoch: int = 300,
        max_patience: int = 50,
        seed: int = 0,
        center_root: bool = False,
        heterogeneous_heads: bool = False,
        importance_stop_gradient: bool = True,
        loss_variant: str = "himpc_h",
        l2_normalize: bool = False,
    ):
        self.f = f
        self.h = h
        self.m_heads = m_heads
        self.eps = eps
        self.min_samples = min_samples
        self.lr = lr
        self.batch_size = batch_size
        self.max_epoch = max_epoch
        self.max_patience = max_patience
        self.seed = seed
        self.center_root = center_root
        self.heterogeneous_heads = heterogeneous_heads
        self.importance_stop_gradient = importance_stop_gradient
        self.loss_variant = loss_variant
        self.l2_normalize = l2_normalize

    def _config(self) -> TrainConfig:
        return TrainConfig(**{k: v for k, v in self.get_params().items()})

    def fit(self, X, y=None):
        """Train on unlabeled sequences; ``y`` is accepted but never read."""
        coords = validate_sequences(X, self.f)
        self.params_, self.train_log_ = train(coords, self._config())
        return self

    def transform(self, X) -> Array:
        if not hasattr(self, "params_"):
            raise RuntimeError("fit the encoder before calling transform")
        coords = validate_sequences(X, self.f)
        return build_msmr_batch(self.params_, coords, center_root=self.center_root)
