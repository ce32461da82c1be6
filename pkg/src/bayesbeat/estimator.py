"""scikit-learn style wrappers around preprocessing, training and MC inference."""
from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataio import SOURCE_RATES, SegmentSet, preprocess, split_subjects
from .errors import ConfigError, DataError
from .inference import DEFAULT_DRAWS, Prediction, ThresholdPolicy, predict_batch
from .network import Network, NetworkConfig, build
from .trainer import TrainConfig, train


class PPGPreprocessor(TransformerMixin, BaseEstimator):
    """Row-wise resampling, bandpass filtering and [0, 1] scaling of raw 25 s recordings.

    Stateless: ``fit`` only validates the input width.
    """

    def __init__(self, source_rate: int = 32):
        self.source_rate = source_rate

    def fit(self, X, y=None):
        if self.source_rate not in SOURCE_RATES:
            raise ConfigError(f"source_rate must be one of {SOURCE_RATES}")
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return np.stack([preprocess(row, self.source_rate) for row in X]) if len(X) else \
            np.zeros((0, 800), dtype=np.float32)


class BayesBeatClassifier(ClassifierMixin, BaseEstimator):
    """Variational 1-D CNN for AF detection with uncertainty-based abstention.

    ``fit`` holds out whole subjects (``groups``) for validation-based model
    selection unless an explicit validation set is given. ``predict_proba``
    averages ``mc_draws`` posterior draws; ``predict_uncertainty`` returns the
    scalar aleatoric score used for thresholding.
    """

    def __init__(self, network_config: Optional[NetworkConfig] = None, epochs: int = 50,
                 batch_size: int = 512, learning_rate: float = 1e-3, kl_scale: float = 1e-5,
                 mode: str = "local-reparam", mc_draws_train: int = 1, mc_draws: int = DEFAULT_DRAWS,
                 val_mc_draws: int = 8, val_fraction: float = 0.15, bn_calibration_size: int = 1024,
                 threshold: Optional[float] = None, seed: int = 0):
        self.network_config = network_config
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.kl_scale = kl_scale
        self.mode = mode
        self.mc_draws_train = mc_draws_train
        self.mc_draws = mc_draws
        self.val_mc_draws = val_mc_draws
        self.val_fraction = val_fraction
        self.bn_calibration_size = bn_calibration_size
        self.threshold = threshold
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate, epochs=self.epochs,
                           mc_draws_train=self.mc_draws_train, kl_scale=self.kl_scale, mode=self.mode,
                           seed=self.seed, val_mc_draws=self.val_mc_draws,
                           bn_calibration_size=self.bn_calibration_size).validate()

    def _holdout(self, X, y, groups):
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        rest = (1 - self.val_fraction) / 2
        manifest = split_subjects(groups, (rest, self.val_fraction, rest), seed=self.seed)
        val = np.array([manifest.assignment[g] == "val" for g in groups])
        return ~val, val

    def fit(self, X, y, groups=None, X_val=None, y_val=None, groups_val=None):
        X, y = check_X_y(X, y, dtype=np.float32)
        if not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0 (non-AF) or 1 (AF)")
        groups = [str(i) for i in range(len(y))] if groups is None else [str(g) for g in groups]
        if X_val is None:
            tr, va = self._holdout(X, y, groups)
            X_val, y_val, groups_val = X[va], y[va], [g for g, v in zip(groups, va) if v]
            X, y, groups = X[tr], y[tr], [g for g, t in zip(groups, tr) if t]
        else:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float32)
            groups_val = ([f"val-{i}" for i in range(len(y_val))] if groups_val is None
                          else [str(g) for g in groups_val])
        noise = np.full(len(y), np.nan)
        train_set = SegmentSet(X, y.astype(np.int64), groups, noise, [str(i) for i in range(len(y))])
        val_set = SegmentSet(X_val, np.asarray(y_val, dtype=np.int64), groups_val,
                             np.full(len(y_val), np.nan), [str(i) for i in range(len(y_val))])
        config = self.network_config or NetworkConfig()
        if X.shape[1] != config.input_length:
            raise DataError(f"expected {config.input_length} samples per row, got {X.shape[1]}")
        self.network_ = build(config, seed=self.seed)
        result = train(self.network_, train_set, val_set, self._train_config())
        self.checkpoint_ = result.checkpoint
        self.history_ = result.reports
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_network(cls, net: Network, **params) -> "BayesBeatClassifier":
        """Wrap an already trained network (e.g. loaded from a checkpoint)."""
        est = cls(network_config=net.config, **params)
        est.network_ = net
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = net.config.input_length
        return est

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} samples per row, got {X.shape[1]}")
        return X

    def predict_detailed(self, X, segment_ids=None) -> List[Prediction]:
        X = self._check(X)
        return predict_batch(self.network_, X, self.mc_draws, self.seed, ThresholdPolicy(self.threshold),
                             segment_ids)

    def predict_proba(self, X) -> np.ndarray:
        return np.stack([p.p_mean for p in self.predict_detailed(X)])

    def predict(self, X) -> np.ndarray:
        return np.array([p.label for p in self.predict_detailed(X)], dtype=np.int64)

    def predict_uncertainty(self, X) -> np.ndarray:
        return np.array([p.u_scalar for p in self.predict_detailed(X)])

    def transform(self, X) -> np.ndarray:
        """Penultimate-layer features (mean weights, eval mode)."""
        return self.network_.penultimate_features(self._check(X))
