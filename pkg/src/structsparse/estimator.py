"""scikit-learn compatible wrapper around the prune-then-train pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .harness.config import ExperimentConfig
from .harness.training import prune_model, train_epochs
from .models import build_model
from .pruning import detect_collapse


def _as_images(X: np.ndarray) -> np.ndarray:
    """(n, d) feature rows become (n, d, 1, 1); 3D/4D image batches pass through."""
    if X.ndim == 2:
        return X[:, :, None, None]
    if X.ndim == 3:
        return X[:, None]
    return X


class SparseNetClassifier(ClassifierMixin, BaseEstimator):
    """A pruned (or factorized) MLP/VGG classifier with ``fit``/``predict``.

    Parameters mirror the experiment config. Magnitude pruning pre-trains
    for ``pretrain_epochs`` first; other methods score the untrained network.
    """

    def __init__(self, architecture="fc6", head="dense", body="dense", hidden_width=100,
                 activation="relu", init="random", method="none", sparsity=1.0, epochs=5,
                 pretrain_epochs=5, lr=0.001, batch_size=256, dropout=0.1, weight_decay=0.0,
                 synflow_iterations=100, seed=0):
        self.architecture = architecture
        self.head = head
        self.body = body
        self.hidden_width = hidden_width
        self.activation = activation
        self.init = init
        self.method = method
        self.sparsity = sparsity
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.dropout = dropout
        self.weight_decay = weight_decay
        self.synflow_iterations = synflow_iterations
        self.seed = seed

    def _config(self) -> ExperimentConfig:
        return ExperimentConfig(
            dataset="array", architecture=self.architecture, head=self.head, body=self.body,
            hidden_width=self.hidden_width, activation=self.activation, init=self.init,
            method=self.method, sparsity=self.sparsity, seed=self.seed, lr=self.lr, dropout=self.dropout,
            batch_size=self.batch_size, pretrain_epochs=self.pretrain_epochs, epochs=self.epochs,
            weight_decay=self.weight_decay, synflow_iterations=self.synflow_iterations,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        images = _as_images(X)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        cfg = self._config()
        train = Dataset(images, y_idx.astype(np.int64), "array", "train", len(self.classes_))
        model = build_model(cfg.model_config(train.input_shape, train.n_classes))
        if cfg.method == "magnitude" and cfg.pretrain_epochs > 0:
            train_epochs(model, train, cfg, cfg.pretrain_epochs, phase=0)
        mask = prune_model(model, train, cfg)
        self.collapse_report_ = detect_collapse(model, mask)
        self.loss_curve_ = train_epochs(model, train, cfg, cfg.epochs, phase=1, schedule=cfg.schedule)
        self.model_ = model
        self.mask_ = mask
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features, expected {self.n_features_in_}")
        return self.model_.logits(_as_images(X).reshape((len(X),) + self.model_.input_shape))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
