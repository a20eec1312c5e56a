"""Count regularizer, multi-scale scale-aware loss, its gradient, and an L2 baseline.

Per scale ``s`` the loss is

    dbar_L^T (S_hat + lam I)^-1 dbar_L  +  reg_weight * sum_i |m_i - t_s|

with ``m_i = sum_j D_s(x_j) phi_i(x_j) / (sum_k phi_k(x_j) + eps_den)`` the
mass soft-assigned to head ``i``. ``D_s`` carries the mixture weight
``w_s``, so the per-scale target is ``t_s = w_s`` (each head's share of the
weighted component); :func:`regularizer` used on its own defaults to
``target=1`` for unit-mass maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._validation import check_scale_index
from .annotation import AnnotatedScene, ScaleParams, rescale_annotations
from .density import DensityField, _axis_kernel, approx_cov
from .exceptions import GridMismatchError
from .lowrank import (
    DEFAULT_MASS_THRESHOLD,
    DEFAULT_REL_JITTER,
    RankMApprox,
    select_pixels,
    truncate_cov,
)

EPS_DEN = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    per_scale_nll: tuple[float, ...]
    per_scale_reg: tuple[float, ...]
    total: float


def soft_assignment(scene: AnnotatedScene, params: ScaleParams, scale_index, width, height,
                    eps_den=EPS_DEN) -> np.ndarray:
    """(N, J) matrix of ``phi_i(x_j) / (sum_k phi_k(x_j) + eps_den)``.

    ``phi`` is centred on the annotated positions with variance ``beta_s``.
    """
    s = check_scale_index(scale_index, params.num_scales)
    pos = rescale_annotations(scene, s, params.downsample_factor, use_noisy=True)
    if pos.shape[0] == 0:
        return np.zeros((0, width * height))
    beta = params.beta_at(s)
    gx = _axis_kernel(np.arange(width, dtype=np.float64), pos[:, 0], beta)
    gy = _axis_kernel(np.arange(height, dtype=np.float64), pos[:, 1], beta)
    phi = (gy[:, :, None] * gx[:, None, :]).reshape(pos.shape[0], width * height)
    return phi / (phi.sum(axis=0) + eps_den)


def regularizer(pred: DensityField, scene: AnnotatedScene, params: ScaleParams, scale_index,
                target=1.0, eps_den=EPS_DEN, assignment=None) -> float:
    """``sum_i |m_i - target|`` over heads, summing over every pixel of the grid."""
    s = check_scale_index(scale_index, params.num_scales)
    if pred.scale_index != s:
        raise GridMismatchError(f"prediction is at scale {pred.scale_index}, expected {s}")
    if assignment is None:
        assignment = soft_assignment(scene, params, s, pred.width, pred.height, eps_den)
    masses = assignment @ pred.values
    return float(np.sum(np.abs(masses - target)))


def precompute_terms(scene: AnnotatedScene, params: ScaleParams, grids=None,
                     mass_threshold=DEFAULT_MASS_THRESHOLD, rank=None, jitter=None,
                     rel_jitter=DEFAULT_REL_JITTER, max_pixels=4096):
    """Per-scale ``(mean, RankMApprox)`` pairs for :func:`total_loss`.

    ``rank`` larger than the selected set is clipped to it. A scale without
    variance mass (no heads, or zero mixture weight) gets ``None`` as its
    approximation and its likelihood term is the empty sum.
    """
    if grids is None:
        grids = params.grids(scene.width, scene.height)
    terms = []
    for s, grid in enumerate(grids, start=1):
        gauss = approx_cov(scene, params, s, grid=grid, max_pixels=max_pixels)
        var = np.clip(gauss.diag_var, 0.0, None)
        if not var.sum() > 0:
            terms.append((gauss.mean, None))
            continue
        selected = select_pixels(var, mass_threshold)
        r = None if rank is None else min(int(rank), selected.shape[0])
        approx = truncate_cov(gauss.cov, selected, rank=r, jitter=jitter,
                              rel_jitter=rel_jitter)
        terms.append((gauss.mean, approx))
    return terms


class ScaleAwareObjective:
    """Loss and gradient over flat per-scale prediction vectors.

    Soft assignments are computed once, so repeated evaluations inside an
    optimiser only cost the quadratic forms and one (N, J) product per scale.
    """

    def __init__(self, scene: AnnotatedScene, params: ScaleParams, precomputed, grids=None,
                 reg_weight=1.0, eps_den=EPS_DEN):
        if grids is None:
            grids = params.grids(scene.width, scene.height)
        if len(precomputed) != params.num_scales or len(grids) != params.num_scales:
            raise ValueError(
                f"expected {params.num_scales} scales, got {len(precomputed)} precomputed "
                f"terms and {len(grids)} grids")
        self.scene = scene
        self.params = params
        self.grids = [tuple(g) for g in grids]
        self.means = [np.asarray(m, dtype=np.float64) for m, _ in precomputed]
        self.approxes: list[RankMApprox | None] = [a for _, a in precomputed]
        self.reg_weight = float(reg_weight)
        self.targets = list(params.weights)
        self.assignments = [
            soft_assignment(scene, params, s, w, h, eps_den)
            for s, (w, h) in enumerate(self.grids, start=1)
        ]
        for mean, (w, h) in zip(self.means, self.grids):
            if mean.shape[0] != w * h:
                raise GridMismatchError("precomputed mean does not match its grid")

    def _check(self, values):
        if len(values) != self.params.num_scales:
            raise ValueError(
                f"expected {self.params.num_scales} predictions, got {len(values)}")
        out = []
        for v, (w, h) in zip(values, self.grids):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (w * h,):
                raise GridMismatchError(f"prediction has shape {v.shape}, grid is {w}x{h}")
            out.append(v)
        return out

    def masses(self, values):
        return [a @ v for a, v in zip(self.assignments, self._check(values))]

    def breakdown(self, values) -> LossBreakdown:
        values = self._check(values)
        nll, reg = [], []
        for v, mean, approx, assign, target in zip(values, self.means, self.approxes,
                                                   self.assignments, self.targets):
            nll.append(0.0 if approx is None else approx.quadratic_form(approx.restrict(v - mean)))
            reg.append(self.reg_weight * float(np.sum(np.abs(assign @ v - target))))
        return LossBreakdown(tuple(nll), tuple(reg), math.fsum(nll) + math.fsum(reg))

    def value(self, values) -> float:
        return self.breakdown(values).total

    def gradient(self, values) -> list[np.ndarray]:
        values = self._check(values)
        grads = []
        for v, mean, approx, assign, target in zip(values, self.means, self.approxes,
                                                   self.assignments, self.targets):
            g = self.reg_weight * (np.sign(assign @ v - target) @ assign)
            if approx is not None:
                g[approx.selected] += 2.0 * approx.solve(approx.restrict(v - mean))
            grads.append(g)
        return grads

    def nll_gradient(self, values) -> list[np.ndarray]:
        values = self._check(values)
        grads = []
        for v, mean, approx in zip(values, self.means, self.approxes):
            g = np.zeros_like(v)
            if approx is not None:
                g[approx.selected] = 2.0 * approx.solve(approx.restrict(v - mean))
            grads.append(g)
        return grads


def _field_values(preds: Sequence[DensityField], params: ScaleParams):
    for s, p in enumerate(preds, start=1):
        if p.scale_index != s:
            raise GridMismatchError(f"prediction {s} is tagged scale {p.scale_index}")
    return [p.values for p in preds]


def total_loss(preds: Sequence[DensityField], scene: AnnotatedScene, params: ScaleParams,
               precomputed, reg_weight=1.0, eps_den=EPS_DEN) -> LossBreakdown:
    """Sum over scales of the rank-M NLL and the per-head count regularizer."""
    if len(preds) != params.num_scales:
        raise ValueError(f"expected {params.num_scales} predictions, got {len(preds)}")
    grids = [p.grid for p in preds]
    obj = ScaleAwareObjective(scene, params, precomputed, grids, reg_weight, eps_den)
    return obj.breakdown(_field_values(preds, params))


def loss_gradient(preds: Sequence[DensityField], scene: AnnotatedScene, params: ScaleParams,
                  precomputed, reg_weight=1.0, eps_den=EPS_DEN) -> list[DensityField]:
    """Analytic gradient of :func:`total_loss` w.r.t. every prediction pixel.

    ``sign(0)`` is taken as 0 at the kinks of the absolute value.
    """
    if len(preds) != params.num_scales:
        raise ValueError(f"expected {params.num_scales} predictions, got {len(preds)}")
    grids = [p.grid for p in preds]
    obj = ScaleAwareObjective(scene, params, precomputed, grids, reg_weight, eps_den)
    grads = obj.gradient(_field_values(preds, params))
    return [p.with_values(g) for p, g in zip(preds, grads)]


def baseline_l2_loss(pred: DensityField, target: DensityField) -> float:
    """Sum of squared pixel differences."""
    pred.check_same_grid(target)
    diff = pred.values - target.values
    return float(np.dot(diff, diff))


def baseline_l2_gradient(pred: DensityField, target: DensityField) -> DensityField:
    pred.check_same_grid(target)
    return pred.with_values(2.0 * (pred.values - target.values))
