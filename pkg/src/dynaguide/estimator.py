"""scikit-learn style wrapper around per-image refinement."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .config import RunConfig
from .evaluation import evaluate
from .network import forward
from .trainer import refine
from .validation import check_image, check_label_map


class DynaGuideSegmenter(ClusterMixin, TransformerMixin, BaseEstimator):
    """Segment one image by training a small CNN under pseudo-label guidance.

    ``fit(X, y)`` takes an image ``X`` (``[3, H, W]``, or ``[H, W, 3]`` with
    ``channel_axis=-1``) and the external pseudo-label map ``y``. Each call to
    ``fit`` starts from freshly initialised weights.

    Attributes
    ----------
    labels_ : ndarray of shape (H, W)
        Cluster assignment of the fitted image at the last iteration, taken
        before the final weight update. ``predict`` uses the updated weights.
    n_clusters_ : int
        Number of distinct clusters in ``labels_``.
    trace_ : RunTrace
        Per-iteration losses and cluster counts.
    params_ : NetworkParams
        Trained network weights.
    """

    def __init__(self, p=100, q=100, block_count=3, kernel_size=3, use_skip=True,
                 include_diagonal=True, use_huber=True, guidance_enabled=True, alpha=15.0,
                 huber_delta=1.0, learning_rate=0.1, momentum=0.9, iterations=200,
                 min_clusters=3, bn_eps=1e-5, reduction="mean", output_affine=True,
                 padding_mode="replicate", init_gain=0.05, random_state=0, channel_axis=0):
        self.p = p
        self.q = q
        self.block_count = block_count
        self.kernel_size = kernel_size
        self.use_skip = use_skip
        self.include_diagonal = include_diagonal
        self.use_huber = use_huber
        self.guidance_enabled = guidance_enabled
        self.alpha = alpha
        self.huber_delta = huber_delta
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.iterations = iterations
        self.min_clusters = min_clusters
        self.bn_eps = bn_eps
        self.reduction = reduction
        self.output_affine = output_affine
        self.padding_mode = padding_mode
        self.init_gain = init_gain
        self.random_state = random_state
        self.channel_axis = channel_axis

    def _config(self) -> RunConfig:
        params = self.get_params()
        params.pop("channel_axis")
        seed = params.pop("random_state")
        return RunConfig(seed=0 if seed is None else int(seed), **params)

    def fit(self, X, y=None):
        config = self._config()
        image = check_image(X, self.channel_axis)
        pseudo = None if y is None else check_label_map(y, shape=image.shape[1:],
                                                         name="pseudo-labels")
        if pseudo is None and config.guidance_enabled:
            raise ValueError("pseudo-labels y are required when guidance_enabled=True")
        labels, trace, params = refine(image, pseudo, config)
        self.config_ = config
        self.labels_ = labels
        self.trace_ = trace
        self.params_ = params
        self.n_clusters_ = int(np.unique(labels).size)
        return self

    def transform(self, X):
        """Normalized response map ``[q, H, W]`` of the fitted network on ``X``."""
        check_is_fitted(self, "params_")
        image = check_image(X, self.channel_axis)
        with T.Tape():
            out = forward(self.params_, image)
        return out.response.data.copy()

    def predict(self, X):
        check_is_fitted(self, "params_")
        image = check_image(X, self.channel_axis)
        with T.Tape():
            return forward(self.params_, image).labels

    def fit_predict(self, X, y=None):
        return self.fit(X, y).labels_

    def score(self, X, y):
        """mIoU of ``predict(X)`` against ground truth ``y`` after Hungarian matching."""
        return evaluate(self.predict(X), y).miou
