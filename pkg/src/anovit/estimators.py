"""Scikit-learn style estimators wrapping the reconstruction models.

Both detectors follow the one-class protocol: ``fit(X)`` on normal images
only, then score test images by reconstruction error. Image geometry is
inferred from the data at fit time; architecture and training settings are
constructor parameters, so the estimators compose with ``get_params`` /
``set_params``, cloning, and model-selection tooling.

Sign conventions: ``anomaly_scores`` returns the raw image-level anomaly
score (higher = more anomalous); ``score_samples`` / ``decision_function``
return its negation to match the scikit-learn outlier-detector convention
(higher = more normal).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .cae import CaeConfig, ConvAutoencoder
from .decoder import VitAutoencoder
from .evaluation import image_scores
from .scoring import gaussian_smooth, score_map
from .training import TrainConfig, fit as train_fit
from .validation import check_images, check_same_geometry
from .vit import EncoderConfig


class _ReconstructionDetector(BaseEstimator):
    """Shared fit/score machinery; subclasses build the underlying model."""

    def _build_model(self, h: int, w: int, c: int):
        raise NotImplementedError

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            loss_reduction=self.loss_reduction,
            augment=self.augment,
        )

    def fit(self, X, y=None):
        """Train on normal images X of shape (n, H, W, C) or (n, H, W)."""
        X = check_images(X)
        _, h, w, c = X.shape
        self.model_ = self._build_model(h, w, c)
        ckpt = train_fit(X, self.model_, self._train_config())
        self.loss_history_ = list(ckpt.manifest["loss_history"])
        self.image_shape_ = (h, w, c)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                f"this {type(self).__name__} instance is not fitted yet; call fit first"
            )

    def _validated(self, X) -> np.ndarray:
        self._check_fitted()
        return check_same_geometry(check_images(X), self.image_shape_)

    def reconstruct(self, X) -> np.ndarray:
        """Model reconstructions of X, same shape, values in [0, 1]."""
        X = self._validated(X)
        return self.model_.reconstruct(X)

    def score_maps(self, X) -> np.ndarray:
        """Per-pixel anomaly maps (n, H, W), smoothed per the estimator settings."""
        X = self._validated(X)
        recon = self.model_.reconstruct(X)
        maps = np.empty(X.shape[:3], dtype=np.float64)
        for i in range(X.shape[0]):
            m = score_map(X[i], recon[i])
            maps[i] = gaussian_smooth(m, self.sigma) if self.smooth else m
        return maps

    def anomaly_scores(self, X) -> np.ndarray:
        """Image-level anomaly scores (max of each score map); higher = more anomalous."""
        X = self._validated(X)
        return image_scores(self.model_, X, sigma=self.sigma, smooth=self.smooth)

    def score_samples(self, X) -> np.ndarray:
        """Negated anomaly scores (scikit-learn convention: higher = more normal)."""
        return -self.anomaly_scores(X)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X)


class AnovitDetector(_ReconstructionDetector):
    """Transformer encoder-decoder anomaly detector trained from scratch.

    Parameters mirror the encoder/decoder configuration (patch size, token
    width, heads, depth, MLP ratio) plus training and scoring settings. Image
    height/width must be divisible by ``patch_size`` with a square patch grid.
    """

    def __init__(self, patch_size=8, embed_dim=64, heads=4, depth=4, mlp_ratio=4,
                 epochs=30, batch_size=8, learning_rate=1e-4,
                 loss_reduction="sum_per_image", augment=False,
                 sigma=4.0, smooth=True, seed=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.heads = heads
        self.depth = depth
        self.mlp_ratio = mlp_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.loss_reduction = loss_reduction
        self.augment = augment
        self.sigma = sigma
        self.smooth = smooth
        self.seed = seed

    def _build_model(self, h, w, c):
        config = EncoderConfig(
            image_h=h, image_w=w, channels=c,
            patch_size=self.patch_size, embed_dim=self.embed_dim,
            heads=self.heads, depth=self.depth, mlp_ratio=self.mlp_ratio,
        )
        return VitAutoencoder(config, seed=self.seed)


class CaeDetector(_ReconstructionDetector):
    """Convolutional-autoencoder baseline with the identical scoring interface."""

    def __init__(self, epochs=30, batch_size=8, learning_rate=1e-4,
                 loss_reduction="sum_per_image", augment=False,
                 sigma=4.0, smooth=True, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.loss_reduction = loss_reduction
        self.augment = augment
        self.sigma = sigma
        self.smooth = smooth
        self.seed = seed

    def _build_model(self, h, w, c):
        return ConvAutoencoder(CaeConfig.default_for(h, w, c), seed=self.seed)
