"""Scikit-learn style wrappers around the reconstruction and detection
networks.

These are thin adapters: `LearnedReconstructor` is a transformer from
sinograms to MU volumes, `PatchClassifier` a binary classifier on
normalized patches.  They follow the fit/transform/predict conventions
(get_params/set_params via BaseEstimator) so they compose with sklearn
tooling; the heavy lifting stays in the functional modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .detectnet import PATCH_SHAPE, detect_patches, init_detector_params
from .geometry import ImageGrid, Sinogram, hu_to_mu
from .reconnet import init_recon_params, reconstruct_volume
from .training import TrainConfig, train_detector, train_recon

from . import autodiff as ad


class LearnedReconstructor(TransformerMixin, BaseEstimator):
    """Unrolled primal-dual reconstruction as a sinogram -> volume transformer.

    ``fit(X, y)`` takes sequences of Sinogram and ground-truth MU Volume;
    ``transform(X)`` maps sinograms to reconstructed MU volumes.
    """

    def __init__(self, grid: ImageGrid = None, n_iters=5, hidden=32,
                 epochs=1, samples_per_scan=50, lr=1e-4, seed=0):
        self.grid = grid
        self.n_iters = n_iters
        self.hidden = hidden
        self.epochs = epochs
        self.samples_per_scan = samples_per_scan
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        if self.grid is None:
            raise ValueError("LearnedReconstructor needs an ImageGrid")
        if len(X) != len(y):
            raise ValueError(f"{len(X)} sinograms but {len(y)} target volumes")
        self.theta_ = init_recon_params(seed=self.seed, n_iters=self.n_iters,
                                        hidden=self.hidden)
        cfg = TrainConfig.for_stage(1, epochs=self.epochs,
                                    samples_per_scan=self.samples_per_scan,
                                    lr=self.lr, seed=self.seed)
        self.loss_trace_ = train_recon(list(zip(X, y)), self.theta_, cfg, self.grid)
        return self

    def transform(self, X):
        check_is_fitted(self, "theta_")
        return [reconstruct_volume(s, self.theta_, self.grid) for s in X]


class PatchClassifier(ClassifierMixin, BaseEstimator):
    """3D CNN nodule classifier on normalized patches.

    ``X`` is (n_samples, px, py, pz) in normalized intensity units,
    ``y`` binary labels.
    """

    def __init__(self, patch_shape=PATCH_SHAPE, stage_channels=(32, 64, 128),
                 head_channels=256, epochs=10, minibatch=50, lr=1e-4, seed=0):
        self.patch_shape = patch_shape
        self.stage_channels = stage_channels
        self.head_channels = head_channels
        self.epochs = epochs
        self.minibatch = minibatch
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 4 or X.shape[1:] != tuple(self.patch_shape):
            raise ValueError(
                f"X must be (n, {', '.join(map(str, self.patch_shape))}), got {X.shape}")
        if set(np.unique(y)) - {0.0, 1.0}:
            raise ValueError("labels must be binary")
        self.classes_ = np.array([0, 1])
        self.eta_ = init_detector_params(seed=self.seed,
                                         patch_shape=tuple(self.patch_shape),
                                         stage_channels=tuple(self.stage_channels),
                                         head_channels=self.head_channels)
        cfg = TrainConfig.for_stage(2, epochs=self.epochs,
                                    minibatch=self.minibatch,
                                    lr=self.lr, seed=self.seed)
        self.loss_trace_ = train_detector(X, y, self.eta_, cfg)
        return self

    def predict_proba(self, X, batch=64):
        check_is_fitted(self, "eta_")
        X = np.asarray(X)
        probs = np.empty(len(X))
        with ad.no_grad():
            for lo in range(0, len(X), batch):
                probs[lo:lo + batch] = detect_patches(X[lo:lo + batch], self.eta_).data
        return np.stack([1.0 - probs, probs], axis=1)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
