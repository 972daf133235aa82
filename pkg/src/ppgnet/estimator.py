"""scikit-learn facade over the network and its training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .model import ModelConfig, build_model
from .trainer import TrainConfig, train_arrays


class PPGNetRegressor(RegressorMixin, BaseEstimator):
    """Heart-rate regressor over fixed-length PPG windows.

    ``X`` is ``(n_windows, 1000)`` of normalized 125 Hz samples and ``y`` is
    BPM. ``fit`` trains from a fresh seeded initialization unless
    ``warm_start`` is set, in which case it continues from the current
    weights (the transfer-learning path, usually with ``trainable_blocks``).

    Attributes after fitting: ``model_``, ``history_``, ``n_features_in_``.
    """

    def __init__(
        self,
        learning_rate=0.02,
        batch_size=128,
        epochs=750,
        dropout=0.1,
        seed=0,
        shuffle=True,
        trainable_blocks=None,
        warm_start=False,
    ):
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.dropout = dropout
        self.seed = seed
        self.shuffle = shuffle
        self.trainable_blocks = trainable_blocks
        self.warm_start = warm_start

    def _model_config(self) -> ModelConfig:
        return ModelConfig(dropout=self.dropout, seed=self.seed)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        cfg = self._model_config()
        if X.shape[1] != cfg.window_samples:
            raise ValueError(f"expected {cfg.window_samples} samples per window, got {X.shape[1]}")
        if not (self.warm_start and hasattr(self, "model_")):
            self.model_ = build_model(cfg)
        self.n_features_in_ = X.shape[1]
        blocks = None if self.trainable_blocks is None else tuple(self.trainable_blocks)
        tcfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            shuffle=self.shuffle,
            freeze=blocks,
        )
        self.history_ = train_arrays(self.model_, X, y, tcfg)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} samples per window, got {X.shape[1]}")
        return self.model_.predict(X)
