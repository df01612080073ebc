"""scikit-learn wrapper around DL-CapsNet training and inference."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data_io import Dataset, batches
from .model import ModelConfig, build_model, class_probabilities
from .run import load_run_config
from .training import TrainConfig, fit, output_lengths


def _as_images(X, input_shape=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, H, W) or (N, H, W, C), got {X.shape}")
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ValueError(f"images are {X.shape[1:]}, model expects {tuple(input_shape)}")
    return X


class DLCapsNetClassifier(ClassifierMixin, BaseEstimator):
    """Capsule-network image classifier with the two-phase margin-loss schedule.

    ``architecture`` is a ``ModelConfig``, a packaged preset name or a config
    file path; ``input_shape`` and ``num_classes`` are taken from the data.
    Images are expected in [0, 1].

    Fitted attributes: ``classes_``, ``model_``, ``history_``.
    """

    def __init__(
        self,
        architecture="fmnist_small",
        epochs_phase1: int = 15,
        epochs_phase2: int = 5,
        batch_size: int = 128,
        base_lr: float = 0.001,
        gamma: float = 0.96,
        recon_weight: float | None = None,
        seed: int = 0,
    ):
        self.architecture = architecture
        self.epochs_phase1 = epochs_phase1
        self.epochs_phase2 = epochs_phase2
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.gamma = gamma
        self.recon_weight = recon_weight
        self.seed = seed

    def _model_config(self, input_shape, num_classes) -> ModelConfig:
        arch = self.architecture
        base = arch if isinstance(arch, ModelConfig) else load_run_config(arch).model
        return dataclasses.replace(
            base, input_shape=tuple(input_shape), num_classes=int(num_classes), seed=self.seed
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32, y_numeric=False)
        X = _as_images(X)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        mcfg = self._model_config(X.shape[1:], len(self.classes_))
        tcfg = TrainConfig(
            base_lr=self.base_lr,
            gamma=self.gamma,
            batch_size=self.batch_size,
            epochs_phase1=self.epochs_phase1,
            epochs_phase2=self.epochs_phase2,
            recon_weight=self.recon_weight,
            seed=self.seed,
        )
        ds = Dataset(X, encoded.astype(np.int64), "train", len(self.classes_))
        self.model_ = build_model(mcfg)

        def make_batches(epoch):
            s = int(np.random.SeedSequence([self.seed, epoch]).generate_state(1)[0])
            return batches(ds, self.batch_size, seed=s)

        self.history_ = fit(self.model_, make_batches, tcfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        """Output-capsule lengths, shape (N, n_classes)."""
        check_is_fitted(self, "model_")
        X = _as_images(check_array(X, allow_nd=True, dtype=np.float32), self.model_.cfg.input_shape)
        return output_lengths(self.model_, X)

    decision_function = transform

    def predict_proba(self, X) -> np.ndarray:
        return class_probabilities(self.transform(X))

    def predict(self, X) -> np.ndarray:
        lengths = self.transform(X)
        return self.classes_[np.argmax(lengths, axis=1)]

    def get_model_config(self) -> ModelConfig:
        check_is_fitted(self, "model_")
        return dataclasses.replace(self.model_.cfg)
