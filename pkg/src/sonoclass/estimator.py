"""scikit-learn compatible classifier around the two-scale ensemble."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .augment import AugmentationConfig
from .ensemble import (
    BackboneSpec,
    EnsembleConfig,
    ensemble_forward,
    softmax,
)
from .losses import LossConfig
from .training import AdamParams, fit_arrays
from .validation import check_images, check_labels

__all__ = ["EnsembleClassifier"]


class EnsembleClassifier(BaseEstimator, ClassifierMixin):
    """Two-branch convolutional ensemble with imbalance-aware losses.

    Images (unit-interval H x W x C arrays or RasterImages) are resized to a
    coarse scale for a small backbone and a fine scale for a deeper one; the
    globally pooled features are concatenated and classified by dense
    layers.  Training uses Adam on one of five losses ("ce", "ce_ls",
    "focal", "ldam", "ldam_focal"); the margin losses weight rare classes by
    the training class counts.

    Examples
    --------
    >>> clf = EnsembleClassifier(epochs=5, seed=0).fit(X, y)
    >>> clf.predict(X[:4])
    """

    def __init__(
        self,
        shallow_input=(32, 32),
        detailed_input=(64, 64),
        shallow_channels=(8, 16, 32),
        detailed_channels=(8, 16, 32, 64, 64),
        classifier_hidden=(),
        loss="ce",
        ls_epsilon=0.1,
        focal_gamma=2.0,
        ldam_max_margin=0.5,
        ldam_scale=30.0,
        mix_alpha=1.0,
        mix_beta=1.0,
        epochs=10,
        batch_size=32,
        learning_rate=1e-3,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        augment=None,
        seed=0,
    ):
        self.shallow_input = shallow_input
        self.detailed_input = detailed_input
        self.shallow_channels = shallow_channels
        self.detailed_channels = detailed_channels
        self.classifier_hidden = classifier_hidden
        self.loss = loss
        self.ls_epsilon = ls_epsilon
        self.focal_gamma = focal_gamma
        self.ldam_max_margin = ldam_max_margin
        self.ldam_scale = ldam_scale
        self.mix_alpha = mix_alpha
        self.mix_beta = mix_beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.augment = augment
        self.seed = seed

    def _model_config(self, n_classes: int) -> EnsembleConfig:
        return EnsembleConfig(
            class_count=n_classes,
            shallow_input=tuple(self.shallow_input),
            detailed_input=tuple(self.detailed_input),
            shallow_backbone=BackboneSpec.from_channels(
                tuple(self.shallow_channels), pool_last=True
            ),
            detailed_backbone=BackboneSpec.from_channels(
                tuple(self.detailed_channels), pool_last=False
            ),
            classifier_hidden=tuple(self.classifier_hidden),
        )

    def fit(self, X, y):
        images = check_images(X)
        y = check_labels(y, n_samples=len(images))
        self.classes_ = np.unique(y)
        n_classes = int(self.classes_.max()) + 1
        if n_classes < 2:
            raise ValueError("need at least two classes")

        config = self._model_config(n_classes)
        loss_config = LossConfig(
            kind=self.loss,
            ls_epsilon=self.ls_epsilon,
            focal_gamma=self.focal_gamma,
            ldam_max_margin=self.ldam_max_margin,
            ldam_scale=self.ldam_scale,
            mix_alpha=self.mix_alpha,
            mix_beta=self.mix_beta,
        )
        augment = self.augment
        if augment is not None and not isinstance(augment, AugmentationConfig):
            raise ValueError("augment must be an AugmentationConfig or None")

        result = fit_arrays(
            images=images,
            labels=y,
            image_ids=[str(i) for i in range(len(images))],
            model_config=config,
            loss_config=loss_config,
            adam=AdamParams(self.learning_rate, self.beta1, self.beta2, self.epsilon),
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            augment=augment,
        )
        self.config_ = config
        self.params_ = result.params
        self.history_ = result.history
        return self

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this EnsembleClassifier instance is not fitted yet"
            )

    def decision_function(self, X) -> np.ndarray:
        self._require_fitted()
        images = check_images(X)
        return np.asarray(ensemble_forward(self.params_, self.config_, images))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)
