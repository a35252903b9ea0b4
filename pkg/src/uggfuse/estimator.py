"""Estimator front-end with the familiar fit/transform/predict surface.

`UggReid` wraps training and embedding behind scikit-learn conventions so the
model composes with pipelines and grid search: constructor args are stored
verbatim, `fit` learns from token arrays, `transform` produces fused
embeddings, and `predict` labels queries by nearest training neighbor.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from .errors import ContractViolationError
from .evalkit import compute_distances
from .model import MODALITIES, VARIANTS
from .objective import TrainConfig, fit as _fit

try:
    from sklearn.base import BaseEstimator, TransformerMixin
except ImportError:  # pragma: no cover - sklearn is an install requirement
    class BaseEstimator:  # type: ignore
        pass

    class TransformerMixin:  # type: ignore
        pass


def check_tokens(X, *, dim=None, n_local=None) -> np.ndarray:
    """Validate a (S, M, n+1, D) token array and return it as float64."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 4:
        raise ContractViolationError(
            f"expected tokens of shape (S, {len(MODALITIES)}, n+1, D), got ndim={arr.ndim}")
    if arr.shape[1] != len(MODALITIES):
        raise ContractViolationError(
            f"expected {len(MODALITIES)} modalities, got {arr.shape[1]}")
    if arr.shape[2] < 2:
        raise ContractViolationError("need a class token plus at least one local token")
    if not np.isfinite(arr).all():
        raise ContractViolationError("tokens must be finite")
    if dim is not None and arr.shape[3] != dim:
        raise ContractViolationError(f"expected D={dim}, got {arr.shape[3]}")
    if n_local is not None and arr.shape[2] != n_local + 1:
        raise ContractViolationError(f"expected n+1={n_local + 1}, got {arr.shape[2]}")
    return arr


def check_labels(y, num_samples) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.shape[0] != num_samples:
        raise ContractViolationError(
            f"labels must be shape ({num_samples},), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        cast = arr.astype(np.int64)
        if not np.array_equal(cast, arr):
            raise ContractViolationError("labels must be integers")
        arr = cast
    return arr.astype(np.int64)


class UggReid(BaseEstimator, TransformerMixin):
    """Multi-modal re-identification model with uncertainty-guided fusion.

    Parameters mirror the training configuration; all are plain values so
    `get_params`/`set_params`/`clone` behave as scikit-learn expects.
    """

    def __init__(self, variant="e", layers=2, c=4, k=1, expert_hidden=0,
                 pooling="mean", tau="median", knn=0, expert_input="x-tilde",
                 bn_neck=False, aux_heads=False, lambda1=0.1, lambda2=1e-4,
                 lambda3=1e-4, lr=3.5e-4, epochs=40, p_ids=4, k_inst=4,
                 margin=0.3, warmup_steps=0, lr_decay="none",
                 metric="euclidean", seed=0):
        self.variant = variant
        self.layers = layers
        self.c = c
        self.k = k
        self.expert_hidden = expert_hidden
        self.pooling = pooling
        self.tau = tau
        self.knn = knn
        self.expert_input = expert_input
        self.bn_neck = bn_neck
        self.aux_heads = aux_heads
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.lr = lr
        self.epochs = epochs
        self.p_ids = p_ids
        self.k_inst = k_inst
        self.margin = margin
        self.warmup_steps = warmup_steps
        self.lr_decay = lr_decay
        self.metric = metric
        self.seed = seed

    # -- scikit-learn protocol ----------------------------------------------

    def _train_config(self, X) -> TrainConfig:
        return TrainConfig(
            seed=self.seed, variant=self.variant, dim=X.shape[3],
            n_local=X.shape[2] - 1, layers=self.layers, c=self.c, k=self.k,
            expert_hidden=self.expert_hidden, pooling=self.pooling,
            tau=self.tau, knn=self.knn, expert_input=self.expert_input,
            bn_neck=self.bn_neck, aux_heads=self.aux_heads,
            lambda1=self.lambda1, lambda2=self.lambda2, lambda3=self.lambda3,
            lr=self.lr, epochs=self.epochs, p_ids=self.p_ids,
            k_inst=self.k_inst, margin=self.margin,
            warmup_steps=self.warmup_steps, lr_decay=self.lr_decay)

    def fit(self, X, y):
        """Train on tokens X of shape (S, 3, n+1, D) with identity labels y."""
        if self.variant not in VARIANTS:
            raise ContractViolationError(f"variant must be one of {VARIANTS}")
        X = check_tokens(X)
        y = check_labels(y, X.shape[0])
        # remap labels to a contiguous 0..C-1 range for the classifier head
        self.classes_, dense = np.unique(y, return_inverse=True)
        dataset = SimpleNamespace(tokens=X, labels=dense.astype(np.int64))
        self.checkpoint_ = _fit(self._train_config(X), dataset)
        self.model_ = self.checkpoint_.build_model()
        self.train_embeddings_ = self.model_.embed(X)
        self.train_labels_ = y.copy()
        self.n_features_in_ = X.shape[3]
        self.n_local_in_ = X.shape[2] - 1
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ContractViolationError(
                "this UggReid instance is not fitted yet; call fit first")

    def transform(self, X) -> np.ndarray:
        """Fused embeddings of shape (S, 3*D)."""
        self._check_fitted()
        X = check_tokens(X, dim=self.n_features_in_, n_local=self.n_local_in_)
        return self.model_.embed(X)

    def predict(self, X) -> np.ndarray:
        """Nearest-training-neighbor identity labels."""
        emb = self.transform(X)
        dist = compute_distances(emb, self.train_embeddings_, self.metric)
        return self.train_labels_[np.argmin(dist, axis=1)]

    def score(self, X, y) -> float:
        """Mean accuracy of nearest-neighbor identity prediction."""
        y = check_labels(y, np.asarray(X).shape[0])
        return float(np.mean(self.predict(X) == y))
