"""scikit-learn wrapper around the select-predict trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from rekd import tensor as T
from rekd.data import Dataset, split
from rekd.evaluation import select_masks
from rekd.models import RationaleModel, apply_mask
from rekd.tensor import Rng
from rekd.training import TrainConfig, train


class RationaleClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Classifier over ``X [n_samples, L, D]`` whose prediction depends only on
    a selected subset of the ``L`` rows.

    ``regime="cls"`` trains a plain full-input classifier, ``"re"`` a
    rationale model, and ``"rekd"`` distills from ``teacher`` (a fitted
    ``RationaleClassifier`` or a :class:`~rekd.models.RationaleModel`).
    ``transform`` returns the masked input.
    """

    def __init__(self, regime="re", backbone="tiny-transformer", depth=1, width=16, heads=2,
                 p_target=0.15, lambda_select=0.01, lambda_R=0.5, alpha=0.3, tau0=5.0,
                 tauK=0.1, epochs=35, batch_size=32, lr=3e-3, weight_decay=1e-3, seed=2026,
                 eval_noise="none", dev_fraction=0.2, teacher=None):
        self.regime = regime
        self.backbone = backbone
        self.depth = depth
        self.width = width
        self.heads = heads
        self.p_target = p_target
        self.lambda_select = lambda_select
        self.lambda_R = lambda_R
        self.alpha = alpha
        self.tau0 = tau0
        self.tauK = tauK
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.eval_noise = eval_noise
        self.dev_fraction = dev_fraction
        self.teacher = teacher

    def _config(self) -> TrainConfig:
        cfg = TrainConfig(
            regime=self.regime, tau0=self.tau0, tauK=self.tauK, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
            seed=self.seed, backbone=self.backbone, depth=self.depth, width=self.width,
            heads=self.heads, eval_noise=self.eval_noise,
        ).replace(p_target=self.p_target, lambda_select=self.lambda_select,
                  lambda_R=self.lambda_R, alpha=self.alpha)
        cfg.validate()
        return cfg

    def _check_X(self, X, reset: bool = False) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected X of shape [n_samples, L, D], got {X.shape}")
        if reset:
            self.n_rows_, self.n_row_features_ = X.shape[1:]
            self.n_features_in_ = X.shape[1] * X.shape[2]
        elif X.shape[1:] != (self.n_rows_, self.n_row_features_):
            raise ValueError(f"X has rows {X.shape[1:]}, fitted on "
                             f"{(self.n_rows_, self.n_row_features_)}")
        return X

    def fit(self, X, y, X_dev=None, y_dev=None):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._check_X(X, reset=True)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        C = len(self.classes_)
        data = Dataset(X, self._encoder.transform(y), None, C)
        if X_dev is None:
            if not 0.0 < self.dev_fraction < 1.0:
                raise ValueError("dev_fraction must lie in (0, 1) when no dev set is given")
            data, dev = split(data, [1.0 - self.dev_fraction, self.dev_fraction], self.seed)
        else:
            X_dev, y_dev = check_X_y(X_dev, y_dev, allow_nd=True, dtype=np.float64)
            dev = Dataset(self._check_X(X_dev), self._encoder.transform(y_dev), None, C)
        teacher = self.teacher
        if isinstance(teacher, RationaleClassifier):
            check_is_fitted(teacher)
            teacher = teacher.model_
        self.artifacts_ = train(self._config(), data, dev, teacher=teacher)
        self.model_ = self.artifacts_.model
        return self

    def rationale(self, X) -> np.ndarray:
        """Binary selection mask ``[n_samples, L]``."""
        check_is_fitted(self)
        X = self._check_X(X)
        cfg = self._config()
        return select_masks(self.model_, X, cfg.tauK, cfg.eval_noise == "sampled",
                            Rng(cfg.seed, (4,)))

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self)
        X = self._check_X(X)
        return X * self.rationale(X)[..., None]

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self)
        X = self._check_X(X)
        M = self.rationale(X)
        with T.no_record():
            return self.model_.predictor(apply_mask(X, M)).data

    def predict_proba(self, X) -> np.ndarray:
        Q = self.decision_function(X)
        e = np.exp(Q - Q.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        Q = self.decision_function(X)
        return self.classes_[Q.argmax(axis=1)]
