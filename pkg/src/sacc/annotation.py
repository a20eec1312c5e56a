"""Scenes, annotation noise and the per-scale variance/weight schedule.

Coordinates are continuous pixel units with the origin at the top-left
corner and pixel centres at integer positions. Annotations keep fractional
coordinates at every scale; nothing is rounded to the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from ._validation import (
    check_int,
    check_points,
    check_scalar,
    check_scale_index,
    check_vector,
    frozen,
)
from .exceptions import DegenerateDistributionError

_PROB_TOL = 1e-9


class Annotation(NamedTuple):
    true_pos: tuple[float, float]
    noisy_pos: tuple[float, float]
    head_size: float


@dataclass(frozen=True, eq=False)
class AnnotatedScene:
    """Image extent plus true and annotated head centres.

    ``noisy_pos = true_pos + eps`` where ``eps`` was drawn once and stored.
    """

    width: int
    height: int
    true_pos: np.ndarray
    noisy_pos: np.ndarray
    head_sizes: np.ndarray

    def __post_init__(self):
        width = check_int(self.width, "width", min_val=1)
        height = check_int(self.height, "height", min_val=1)
        true_pos = check_points(self.true_pos, "true_pos")
        noisy_pos = check_points(self.noisy_pos, "noisy_pos")
        sizes = check_vector(np.atleast_1d(self.head_sizes), "head_sizes")
        if not (true_pos.shape == noisy_pos.shape and sizes.shape[0] == true_pos.shape[0]):
            raise ValueError("true_pos, noisy_pos and head_sizes must describe the same heads")
        if np.any(sizes <= 0):
            raise ValueError("head sizes must be > 0")
        inside = ((true_pos[:, 0] >= 0) & (true_pos[:, 0] < width)
                  & (true_pos[:, 1] >= 0) & (true_pos[:, 1] < height))
        if not np.all(inside):
            raise ValueError("true positions must lie inside [0, width) x [0, height)")
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "height", height)
        object.__setattr__(self, "true_pos", frozen(true_pos.copy()))
        object.__setattr__(self, "noisy_pos", frozen(noisy_pos.copy()))
        object.__setattr__(self, "head_sizes", frozen(sizes.copy()))

    @classmethod
    def from_annotations(cls, width, height, annotations: Iterable[Annotation]):
        annotations = list(annotations)
        return cls(
            width=width,
            height=height,
            true_pos=[a.true_pos for a in annotations],
            noisy_pos=[a.noisy_pos for a in annotations],
            head_sizes=[a.head_size for a in annotations],
        )

    @property
    def count(self) -> int:
        return int(self.true_pos.shape[0])

    @property
    def annotations(self) -> list[Annotation]:
        return [
            Annotation(tuple(t), tuple(n), float(h))
            for t, n, h in zip(self.true_pos.tolist(), self.noisy_pos.tolist(),
                               self.head_sizes.tolist())
        ]

    def positions(self, use_noisy=True) -> np.ndarray:
        return self.noisy_pos if use_noisy else self.true_pos

    def subset(self, index) -> "AnnotatedScene":
        index = np.asarray(index, dtype=np.intp)
        return AnnotatedScene(self.width, self.height, self.true_pos[index],
                              self.noisy_pos[index], self.head_sizes[index])

    def __eq__(self, other):
        if not isinstance(other, AnnotatedScene):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and np.array_equal(self.true_pos, other.true_pos)
                and np.array_equal(self.noisy_pos, other.noisy_pos)
                and np.array_equal(self.head_sizes, other.head_sizes))

    __hash__ = None

    def __repr__(self):
        return f"AnnotatedScene(width={self.width}, height={self.height}, count={self.count})"


def _lognormal_cdf(x, location, scale):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    pos = x > 0
    z = (np.log(x[pos]) - location) / (scale * math.sqrt(2.0))
    out[pos] = 0.5 * (1.0 + np.vectorize(math.erf, otypes=[float])(z))
    return out


@dataclass(frozen=True, eq=False)
class HeadSizeDistribution:
    """Histogram of head sizes on regular bins of width ``bin_width``.

    ``family``/``family_params`` record the parametric model the histogram
    was discretised from, if any; sampling then uses the continuous model.
    """

    sizes: np.ndarray
    probs: np.ndarray
    bin_width: float = 1.0
    family: str | None = None
    family_params: tuple = field(default=())

    def __post_init__(self):
        sizes = check_vector(self.sizes, "sizes")
        probs = check_vector(self.probs, "probs", length=sizes.shape[0])
        bin_width = check_scalar(self.bin_width, "bin_width", min_val=0, include_min=False)
        if sizes.shape[0] == 0:
            raise ValueError("histogram needs at least one bin")
        if np.any(sizes <= 0):
            raise ValueError("bin sizes must be > 0")
        if np.any(np.diff(sizes) <= 0):
            raise ValueError("bin sizes must be strictly increasing")
        if np.any(probs < 0):
            raise ValueError("probabilities must be >= 0")
        if abs(probs.sum() - 1.0) > _PROB_TOL:
            raise ValueError(f"probabilities must sum to 1, got {probs.sum()!r}")
        object.__setattr__(self, "sizes", frozen(sizes.copy()))
        object.__setattr__(self, "probs", frozen(probs.copy()))
        object.__setattr__(self, "bin_width", bin_width)
        object.__setattr__(self, "family_params", tuple(float(p) for p in self.family_params))

    @classmethod
    def lognormal(cls, location=math.log(8.0), scale=0.5, bin_width=0.25):
        """Discretise a log-normal law onto bins ``[k*w, (k+1)*w)``."""
        location = check_scalar(location, "location")
        scale = check_scalar(scale, "scale", min_val=0, include_min=False)
        # mass beyond 8 sigma is below double-precision resolution
        upper = math.exp(location + 8.0 * scale)
        n_bins = int(math.ceil(upper / bin_width))
        edges = np.arange(n_bins + 1, dtype=np.float64) * bin_width
        mass = np.diff(_lognormal_cdf(edges, location, scale))
        probs = mass / mass.sum()
        keep = probs > 0
        return cls(sizes=(edges[:-1] + bin_width / 2)[keep], probs=probs[keep],
                   bin_width=bin_width, family="lognormal",
                   family_params=(location, scale))

    @classmethod
    def from_samples(cls, head_sizes, bin_width=0.5):
        """Accumulate an empirical histogram from observed head sizes."""
        sizes = check_vector(np.atleast_1d(head_sizes), "head_sizes")
        if sizes.shape[0] == 0 or np.any(sizes <= 0):
            raise ValueError("need at least one positive head size")
        bins = np.floor(sizes / bin_width).astype(np.int64)
        first, last = bins.min(), bins.max()
        counts = np.bincount(bins - first, minlength=last - first + 1).astype(np.float64)
        centers = (np.arange(first, last + 1) + 0.5) * bin_width
        return cls(sizes=centers, probs=counts / counts.sum(), bin_width=bin_width)

    @classmethod
    def point(cls, size, bin_width=1.0):
        size = check_scalar(size, "size", min_val=0, include_min=False)
        return cls(sizes=[size], probs=[1.0], bin_width=bin_width)

    def mean(self) -> float:
        return float(np.dot(self.sizes, self.probs))

    def median(self) -> float:
        cdf = np.cumsum(self.probs)
        return float(self.sizes[np.searchsorted(cdf, 0.5)])

    def pmf_nearest(self, size) -> float:
        """Probability of the bin whose centre is nearest to ``size``.

        Sizes farther than half a bin from every centre have probability 0.
        Exact midpoints go to the lower bin.
        """
        idx = int(np.argmin(np.abs(self.sizes - size)))
        if abs(self.sizes[idx] - size) > self.bin_width / 2:
            return 0.0
        return float(self.probs[idx])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "lognormal":
            location, scale = self.family_params
            return rng.lognormal(location, scale, size=n)
        return rng.choice(self.sizes, size=n, p=self.probs)


@dataclass(frozen=True)
class ScaleParams:
    """Mixture configuration: noise variance, per-scale variances and weights.

    With ``scale_alpha`` the annotation-noise variance seen at scale ``s`` is
    ``alpha / factor**(2*(s-1))``, matching the coordinate rescaling.
    """

    alpha: float
    betas: tuple[float, ...]
    weights: tuple[float, ...]
    downsample_factor: float = 2.0
    scale_alpha: bool = True

    def __post_init__(self):
        alpha = check_scalar(self.alpha, "alpha", min_val=0)
        betas = tuple(float(b) for b in self.betas)
        weights = tuple(float(w) for w in self.weights)
        if not betas:
            raise ValueError("need at least one scale")
        if len(weights) != len(betas):
            raise ValueError("betas and weights must have the same length")
        if any(not (b > 0 and math.isfinite(b)) for b in betas):
            raise ValueError("every beta must be > 0")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > _PROB_TOL:
            raise ValueError("weights must be >= 0 and sum to 1")
        factor = check_scalar(self.downsample_factor, "downsample_factor", min_val=1,
                              include_min=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "downsample_factor", factor)

    @classmethod
    def halving(cls, alpha, beta1, weights=None, num_scales=None, **kwargs):
        """Schedule ``beta_{s+1} = beta_s / factor`` from a given ``beta_1``."""
        if weights is None:
            num_scales = check_int(num_scales, "num_scales", min_val=1)
            weights = [1.0 / num_scales] * num_scales
        factor = kwargs.get("downsample_factor", 2.0)
        betas = [beta1 / factor ** s for s in range(len(weights))]
        return cls(alpha=alpha, betas=tuple(betas), weights=tuple(weights), **kwargs)

    @property
    def num_scales(self) -> int:
        return len(self.betas)

    def alpha_at(self, scale_index) -> float:
        s = check_scale_index(scale_index, self.num_scales)
        if not self.scale_alpha:
            return self.alpha
        return self.alpha / self.downsample_factor ** (2 * (s - 1))

    def beta_at(self, scale_index) -> float:
        return self.betas[check_scale_index(scale_index, self.num_scales) - 1]

    def weight_at(self, scale_index) -> float:
        return self.weights[check_scale_index(scale_index, self.num_scales) - 1]

    def grid_shape(self, width, height, scale_index) -> tuple[int, int]:
        """(width, height) of the scale-``s`` grid for an image of the given size."""
        s = check_scale_index(scale_index, self.num_scales)
        div = self.downsample_factor ** (s - 1)
        return int(math.ceil(width / div)), int(math.ceil(height / div))

    def grids(self, width, height) -> list[tuple[int, int]]:
        return [self.grid_shape(width, height, s) for s in range(1, self.num_scales + 1)]

    def with_alpha(self, alpha) -> "ScaleParams":
        return replace(self, alpha=alpha)


def build_scale_params(dist: HeadSizeDistribution, num_scales: int, alpha: float,
                       beta1: float | None = None, downsample_factor: float = 2.0,
                       scale_alpha: bool = True) -> ScaleParams:
    """Derive ``beta_s`` and ``w_s`` from a head-size distribution.

    ``beta_1`` defaults to the distribution mean and halves per scale;
    ``w_s`` is the histogram probability at ``beta_{S+1-s}``, normalised.
    Passing ``beta1`` fixes the first variance directly while keeping the
    distribution-derived weights.
    """
    num_scales = check_int(num_scales, "num_scales", min_val=1)
    alpha = check_scalar(alpha, "alpha", min_val=0, include_min=False)
    if beta1 is None:
        beta1 = dist.mean()
    beta1 = check_scalar(beta1, "beta1", min_val=0, include_min=False)
    betas = [beta1 / downsample_factor ** s for s in range(num_scales)]
    raw = np.array([dist.pmf_nearest(betas[num_scales - s]) for s in range(1, num_scales + 1)])
    total = raw.sum()
    if not total > 0:
        raise DegenerateDistributionError("degenerate head-size distribution")
    return ScaleParams(alpha=alpha, betas=tuple(betas), weights=tuple(raw / total),
                       downsample_factor=downsample_factor, scale_alpha=scale_alpha)


def sample_scene(width, height, count, dist: HeadSizeDistribution, alpha, seed,
                 margin=0.0) -> AnnotatedScene:
    """Draw a synthetic scene with i.i.d. Gaussian annotation noise.

    True positions are uniform over ``[margin, width - margin)`` (and the
    same for height); ``margin=0`` is the whole image. The random stream
    does not depend on ``alpha``, so scenes differing only in ``alpha`` share
    positions and noise directions.
    """
    width = check_int(width, "width", min_val=1)
    height = check_int(height, "height", min_val=1)
    count = check_int(count, "count", min_val=0)
    alpha = check_scalar(alpha, "alpha", min_val=0)
    margin = check_scalar(margin, "margin", min_val=0)
    if 2 * margin >= min(width, height):
        raise ValueError("margin leaves no room for heads")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(margin, width - margin, size=count)
    ys = rng.uniform(margin, height - margin, size=count)
    sizes = dist.sample(rng, count)
    noise = math.sqrt(alpha) * rng.standard_normal((count, 2))
    true_pos = np.column_stack([xs, ys]) if count else np.zeros((0, 2))
    return AnnotatedScene(width, height, true_pos, true_pos + noise, sizes)


def rescale_annotations(scene: AnnotatedScene, scale_index, factor=2.0,
                        use_noisy=True) -> np.ndarray:
    """Annotated positions in scale-``s`` grid coordinates (``p / factor**(s-1)``)."""
    scale_index = check_int(scale_index, "scale_index", min_val=1)
    pos = scene.positions(use_noisy)
    return pos / float(factor) ** (scale_index - 1)


def format_scene(scene: AnnotatedScene) -> str:
    lines = [f"{scene.width} {scene.height} {scene.count}"]
    for (tx, ty), (nx, ny), h in zip(scene.true_pos, scene.noisy_pos, scene.head_sizes):
        lines.append(" ".join(f"{v:.17g}" for v in (tx, ty, nx, ny, h)))
    return "\n".join(lines) + "\n"


def parse_scene(text: str) -> AnnotatedScene:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows or len(rows[0]) != 3:
        raise ValueError("scene header must be 'width height count'")
    width, height, count = (int(v) for v in rows[0])
    body = rows[1:]
    if len(body) != count:
        raise ValueError(f"header declares {count} annotations, found {len(body)}")
    if any(len(r) != 5 for r in body):
        raise ValueError("annotation lines need 5 fields: true_x true_y noisy_x noisy_y head_size")
    data = np.array(body, dtype=np.float64).reshape(count, 5)
    return AnnotatedScene(width, height, data[:, 0:2], data[:, 2:4], data[:, 4])


def write_scene(scene: AnnotatedScene, path) -> None:
    Path(path).write_text(format_scene(scene))


def read_scene(path) -> AnnotatedScene:
    return parse_scene(Path(path).read_text())
