"""scikit-learn style wrapper around the saliency network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Sample
from .metrics import f_measure
from .network import NetworkConfig
from .training import TrainConfig, predict, train
from .validation import check_images, check_masks


class SaliencyDetector(BaseEstimator):
    """Encoder-decoder saliency model with AGCM blocks on the deepest stages.

    ``X`` holds images shaped (n, 3, H, W) in [0, 1]; ``y`` holds binary masks
    shaped (n, H, W) or (n, 1, H, W). Input size is taken from ``X`` at fit time.
    """

    def __init__(self, widths=(8, 16, 24, 32, 40), agcm_stages=(4, 5), n_prototypes=8,
                 n_edgeconv=3, k_nn=2, epochs=75, batch_size=4, lr_start=1e-4, lr_end=1e-5,
                 random_state=0):
        self.widths = widths
        self.agcm_stages = agcm_stages
        self.n_prototypes = n_prototypes
        self.n_edgeconv = n_edgeconv
        self.k_nn = k_nn
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.random_state = random_state

    def _configs(self, size):
        net = NetworkConfig(input_size=size, widths=self.widths, agcm_stages=self.agcm_stages,
                            n_prototypes=self.n_prototypes, n_edgeconv=self.n_edgeconv, k_nn=self.k_nn)
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_start=self.lr_start,
                         lr_end=self.lr_end, seed=self.random_state, image_size=size)
        return net, tc

    def fit(self, X, y):
        images = check_images(X)
        masks = check_masks(y, images)
        net, tc = self._configs(images.shape[2:])
        samples = [Sample(f"{i:04d}", img, m) for i, (img, m) in enumerate(zip(images, masks))]
        result = train(net, tc, samples)
        self.network_config_ = net
        self.params_ = result.params
        self.loss_curve_ = [loss for _, _, loss in result.step_log]
        self.n_steps_ = len(result.step_log)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("SaliencyDetector is not fitted yet; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        """Soft saliency maps shaped (n, H, W)."""
        self._check_fitted()
        images = check_images(X, self.network_config_.input_size)
        return np.stack([predict(img, self.network_config_, self.params_)[0] for img in images])

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.float64)

    def score(self, X, y) -> float:
        """Mean max-F over the given images."""
        images = check_images(X)
        masks = check_masks(y, images)
        probs = self.predict_proba(images)
        return float(np.mean([f_measure(p, m[0]) for p, m in zip(probs, masks)]))
