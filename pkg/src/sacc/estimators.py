"""scikit-learn style wrappers around scale estimation, rendering and counting.

``X`` is a sequence of :class:`AnnotatedScene` objects throughout.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .annotation import AnnotatedScene, HeadSizeDistribution, build_scale_params
from .density import mixture_density
from .harness import ExperimentConfig, fit_scene


def _check_scenes(X) -> list[AnnotatedScene]:
    scenes = list(X)
    if not scenes:
        raise ValueError("expected at least one scene")
    for i, scene in enumerate(scenes):
        if not isinstance(scene, AnnotatedScene):
            raise TypeError(f"X[{i}] is {type(scene).__name__}, expected AnnotatedScene")
    return scenes


def _pooled_sizes(scenes) -> np.ndarray:
    sizes = np.concatenate([sc.head_sizes for sc in scenes])
    if sizes.size == 0:
        raise ValueError("scenes contain no heads to estimate head sizes from")
    return sizes


class ScaleParamEstimator(BaseEstimator):
    """Histogram the pooled head sizes and derive per-scale variances and weights."""

    def __init__(self, num_scales=3, alpha=8.0, beta1=None, bin_width=0.5, scale_alpha=True):
        self.num_scales = num_scales
        self.alpha = alpha
        self.beta1 = beta1
        self.bin_width = bin_width
        self.scale_alpha = scale_alpha

    def fit(self, X, y=None):
        scenes = _check_scenes(X)
        self.distribution_ = HeadSizeDistribution.from_samples(_pooled_sizes(scenes),
                                                               bin_width=self.bin_width)
        self.scale_params_ = build_scale_params(self.distribution_, self.num_scales, self.alpha,
                                                beta1=self.beta1,
                                                scale_alpha=self.scale_alpha)
        self.betas_ = np.array(self.scale_params_.betas)
        self.weights_ = np.array(self.scale_params_.weights)
        return self


class DensityMapTransformer(TransformerMixin, ScaleParamEstimator):
    """Render each scene's weighted per-scale maps, concatenated into one row.

    All scenes passed to :meth:`transform` must share their image size.
    """

    def __init__(self, num_scales=3, alpha=8.0, beta1=None, bin_width=0.5, scale_alpha=True,
                 use_noisy=True):
        super().__init__(num_scales, alpha, beta1, bin_width, scale_alpha)
        self.use_noisy = use_noisy

    def transform(self, X):
        check_is_fitted(self, "scale_params_")
        scenes = _check_scenes(X)
        sizes = {(sc.width, sc.height) for sc in scenes}
        if len(sizes) != 1:
            raise ValueError(f"scenes must share one image size, got {sorted(sizes)}")
        rows = []
        for scene in scenes:
            fields = mixture_density(scene, self.scale_params_, use_noisy=self.use_noisy)
            rows.append(np.concatenate([f.values for f in fields]))
        return np.vstack(rows)


class DensityCounter(RegressorMixin, ScaleParamEstimator):
    """Count heads by fitting density maps to each scene's annotations.

    ``fit`` only learns the scale parameters from head sizes; ``predict``
    runs the per-scene density fit.
    """

    def __init__(self, loss="scale_aware", num_scales=3, alpha=8.0, beta1=None, bin_width=0.5,
                 scale_alpha=True, mass_threshold=0.8, rank=None, iterations=500, step=1.0,
                 backtrack=0.5):
        super().__init__(num_scales, alpha, beta1, bin_width, scale_alpha)
        self.loss = loss
        self.mass_threshold = mass_threshold
        self.rank = rank
        self.iterations = iterations
        self.step = step
        self.backtrack = backtrack

    def fit(self, X, y=None):
        super().fit(X, y)
        self.config_ = ExperimentConfig(alpha=self.alpha, num_scales=self.num_scales,
                                        scale_alpha=self.scale_alpha,
                                        mass_threshold=self.mass_threshold, rank=self.rank,
                                        loss=self.loss, step=self.step,
                                        iterations=self.iterations, backtrack=self.backtrack)
        return self

    def predict(self, X):
        check_is_fitted(self, "config_")
        scenes = _check_scenes(X)
        return np.array([fit_scene(sc, self.config_, self.scale_params_).predicted_count
                         for sc in scenes])
