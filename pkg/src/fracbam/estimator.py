"""scikit-learn style wrapper around model building, training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import (
    check_array, check_consistent_length, check_is_fitted, column_or_1d,
)

from .autodiff import ops
from .data import ArrayData, largest_remainder, resize_bilinear
from .training import TrainConfig, predict_logits, train


def _check_images(X, input_size=None):
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped N x C x H x W, got {X.ndim} dimensions")
    if input_size is not None and X.shape[2:] != (input_size, input_size):
        X = np.stack([resize_bilinear(img.transpose(1, 2, 0), input_size, input_size)
                      .transpose(2, 0, 1) for img in X]).astype(np.float32)
    return X


class BamInceptionClassifier(ClassifierMixin, BaseEstimator):
    """Binary image classifier: Inception-style backbone with attention at
    its three bottlenecks and a dense head.

    ``X`` holds images as N x C x H x W floats in [0, 1]; images are resized
    to ``input_size`` when needed. Without ``X_val`` in :meth:`fit`, a
    ``validation_fraction`` of the training data is held out for the
    scheduler and checkpoint selection.
    """

    def __init__(self, width=32, input_size=224, reduction_ratio=16, dilation=4,
                 attention=True, learning_rate=1e-3, batch_size=32, epochs=100,
                 plateau_factor=0.1, plateau_patience=10, min_lr=1e-6,
                 validation_fraction=0.1, random_state=0, verbose=False):
        self.width = width
        self.input_size = input_size
        self.reduction_ratio = reduction_ratio
        self.dilation = dilation
        self.attention = attention
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.min_lr = min_lr
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.verbose = verbose

    def _config(self):
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            plateau_factor=self.plateau_factor, plateau_patience=self.plateau_patience,
            min_lr=self.min_lr, seed=int(self.random_state), width=self.width,
            input_size=self.input_size, reduction_ratio=self.reduction_ratio,
            dilation=self.dilation, attention=self.attention)

    def _encode(self, y):
        y = column_or_1d(y)
        unknown = np.setdiff1d(y, self.classes_)
        if unknown.size:
            raise ValueError(f"labels {unknown.tolist()} were not seen during fit")
        return np.searchsorted(self.classes_, y)

    def fit(self, X, y, X_val=None, y_val=None):
        config = self._config()
        X = _check_images(X, self.input_size)
        y = column_or_1d(y, warn=True)
        check_consistent_length(X, y)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"need exactly two classes, got {len(self.classes_)}")
        codes = self._encode(y)

        if X_val is not None:
            Xv = _check_images(X_val, self.input_size)
            yv = self._encode(y_val)
            check_consistent_length(Xv, yv)
        else:
            n_val = largest_remainder(len(X), (1 - self.validation_fraction,
                                               self.validation_fraction))[1]
            order = np.random.default_rng(config.seed).permutation(len(X))
            if n_val == 0 or n_val == len(X):
                Xv, yv = X, codes
            else:
                val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
                Xv, yv = X[val_idx], codes[val_idx]
                X, codes = X[tr_idx], codes[tr_idx]

        self.n_channels_in_ = X.shape[1]
        self.model_ = config.build(self.n_channels_in_)
        progress = (lambda r: print(r)) if self.verbose else None
        result = train(self.model_, ArrayData(X, codes), ArrayData(Xv, yv), config,
                       progress=progress)
        self.history_ = [
            {"epoch": r.epoch, "train_loss": r.train_loss, "train_acc": r.train_acc,
             "val_loss": r.val_loss, "val_acc": r.val_acc, "lr": r.lr}
            for r in result.log]
        self.best_epoch_ = result.best_epoch
        return self

    def decision_function(self, X):
        """Logit margin of the second class over the first."""
        logits = self._logits(X)
        return logits[:, 1] - logits[:, 0]

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X, self.input_size)
        if X.shape[1] != self.n_channels_in_:
            raise ValueError(f"X has {X.shape[1]} channels; the model was fit on "
                             f"{self.n_channels_in_}")
        return predict_logits(self.model_, ArrayData(X, np.zeros(len(X), dtype=np.int64)),
                              self.batch_size).astype(np.float64)

    def predict_proba(self, X):
        return ops.softmax_np(self._logits(X))

    def predict(self, X):
        logits = self._logits(X)
        # argmax keeps the first index on ties
        return self.classes_[np.argmax(logits, axis=1)]
