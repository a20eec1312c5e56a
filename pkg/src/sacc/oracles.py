"""Independent reference computations used by tests and ``sacc verify``.

Nothing here reuses the closed-form moment code: the Monte Carlo estimator
redraws annotation noise and renders each draw, the gradient oracle is
central finite differences, and the NLL oracle inverts the dense matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_int
from .annotation import AnnotatedScene, ScaleParams, rescale_annotations


@dataclass(frozen=True, eq=False)
class MonteCarloMoments:
    """Sample mean/covariance of the rendered density with standard errors.

    ``cov_se`` is the plug-in standard error of each sample covariance entry,
    ``sqrt((E[(a-m)^2 (b-n)^2] - cov^2) / n)``, from fourth moments.
    """

    n_draws: int
    mean: np.ndarray
    mean_se: np.ndarray
    cov: np.ndarray | None = None
    cov_se: np.ndarray | None = None


def _render_draws(centers, beta, width, height, weight):
    """``weight * sum_i N(x | c_i, beta I)`` for a (B, N, 2) batch of centre sets."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    dx = xs[None, None, :] - centers[:, :, 0:1]
    dy = ys[None, None, :] - centers[:, :, 1:2]
    fx = np.exp(-0.5 * dx * dx / beta)
    fy = np.exp(-0.5 * dy * dy / beta)
    img = np.einsum("bny,bnx->byx", fy, fx)
    return (weight / (2.0 * math.pi * beta)) * img.reshape(centers.shape[0], width * height)


def monte_carlo_moments(scene: AnnotatedScene, params: ScaleParams, scale_index, n_draws, seed,
                        grid=None, covariance=True, chunk=2000) -> MonteCarloMoments:
    """Redraw ``eps ~ N(0, alpha_s I)``, render heads at ``annotation - eps``, accumulate.

    Raw moments are accumulated about a shift (the first chunk's mean) so the
    single-pass sums stay well conditioned.
    """
    n_draws = check_int(n_draws, "n_draws", min_val=2)
    s = int(scale_index)
    if grid is None:
        grid = params.grid_shape(scene.width, scene.height, s)
    width, height = grid
    n_pix = width * height
    anchors = rescale_annotations(scene, s, params.downsample_factor, use_noisy=True)
    alpha, beta, w = params.alpha_at(s), params.beta_at(s), params.weight_at(s)
    rng = np.random.default_rng(seed)

    shift = None
    s1 = np.zeros(n_pix)
    s2 = np.zeros((n_pix, n_pix)) if covariance else np.zeros(n_pix)
    s21 = np.zeros((n_pix, n_pix)) if covariance else None
    s22 = np.zeros((n_pix, n_pix)) if covariance else None
    done = 0
    while done < n_draws:
        b = min(chunk, n_draws - done)
        eps = math.sqrt(alpha) * rng.standard_normal((b, anchors.shape[0], 2))
        x = _render_draws(anchors[None] - eps, beta, width, height, w)
        if shift is None:
            shift = x.mean(axis=0)
        x -= shift
        s1 += x.sum(axis=0)
        if covariance:
            sq = x * x
            s2 += x.T @ x
            s21 += sq.T @ x
            s22 += sq.T @ sq
        else:
            s2 += np.sum(x * x, axis=0)
        done += b

    n = float(n_draws)
    m = s1 / n
    second = np.diag(s2) / n if covariance else s2 / n
    var = np.maximum(second - m * m, 0.0) * n / (n - 1.0)
    mean = m + shift
    mean_se = np.sqrt(var / n)
    if not covariance:
        return MonteCarloMoments(n_draws, mean, mean_se)

    e_ab = s2 / n
    cov = e_ab - np.outer(m, m)
    e_a2b = s21 / n  # E[a^2 b], row a
    e_a2 = np.diag(e_ab)
    mm, nn = m[:, None], m[None, :]
    fourth = (s22 / n - 2.0 * nn * e_a2b - 2.0 * mm * e_a2b.T
              + nn * nn * e_a2[:, None] + mm * mm * e_a2[None, :]
              + 4.0 * mm * nn * e_ab - 3.0 * mm * mm * nn * nn)
    cov_se = np.sqrt(np.maximum(fourth - cov * cov, 0.0) / n)
    cov = 0.5 * (cov + cov.T) * n / (n - 1.0)
    return MonteCarloMoments(n_draws, mean, mean_se, cov, cov_se)


def z_scores(estimate, reference, se, floor) -> np.ndarray:
    """``|estimate - reference| / max(se, floor)``; the floor covers round-off."""
    return np.abs(np.asarray(estimate) - np.asarray(reference)) / np.maximum(se, floor)


def finite_difference_gradient(func, x, indices, rel_step=1e-5) -> np.ndarray:
    """Central differences of ``func`` at ``x`` along the listed coordinates.

    The step is ``rel_step * max(|x_j|, 1)`` per coordinate.
    """
    x = np.array(x, dtype=np.float64)
    out = np.empty(len(indices))
    for k, j in enumerate(indices):
        h = rel_step * max(abs(x[j]), 1.0)
        orig = x[j]
        x[j] = orig + h
        up = func(x)
        x[j] = orig - h
        down = func(x)
        x[j] = orig
        out[k] = (up - down) / (2.0 * h)
    return out


def dense_quadratic_form(dense, jitter, dbar) -> float:
    """``d^T (S + lam I)^-1 d`` by a dense solve."""
    dense = np.asarray(dense, dtype=np.float64)
    mat = dense + jitter * np.eye(dense.shape[0])
    return float(dbar @ np.linalg.solve(mat, dbar))


def eckart_young_error(singular_values, rank) -> float:
    """Frobenius error of the best rank-``rank`` approximation."""
    tail = np.asarray(singular_values, dtype=np.float64)[rank:]
    return float(math.sqrt(np.sum(tail * tail)))
