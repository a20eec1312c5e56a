"""Density fitting by proximal gradient descent with backtracking.

Each per-scale loss is a smooth term (the rank-M quadratic form, or the
squared error of the L2 baseline) plus ``rho * ||A x - t||_1`` (the count
regularizer). A step from ``y`` linearises the smooth term only and keeps the
absolute values exact::

    z = argmin_x  g^T (x - y) + 1/(2 tau) (x - y)^T P^-1 (x - y) + rho ||A x - t||_1

The minimiser is ``z = y - tau P (g + A^T s)`` with ``s`` the solution of a
box-constrained QP with one variable per head, so the kinks of ``|.|`` never
stall the line search. ``tau`` is shrunk until the smooth term is majorised
by its quadratic model. Iterates are accelerated and only improving
candidates are accepted, so the recorded loss never increases.

The metric ``P`` is half the regularised covariance on the selected pixels,
which makes ``tau = 1`` an exact Newton step on the quadratic form, and a
constant ``(c_max + jitter) / 2`` on all other pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._validation import check_int, check_scalar
from .exceptions import FitDivergedError
from .loss import LossBreakdown, ScaleAwareObjective


def box_qp(Q, c, bound, start=None, max_iter=100) -> np.ndarray:
    """Minimise ``s^T Q s / 2 + c^T s`` over ``|s_i| <= bound``.

    Primal-dual active-set iteration; the free block is solved by least
    squares so a singular ``Q`` is tolerated. Stops when the active sets
    repeat.
    """
    Q = np.asarray(Q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n = c.shape[0]
    s = np.zeros(n) if start is None else np.clip(np.asarray(start, dtype=np.float64),
                                                   -bound, bound)
    if n == 0:
        return s
    kappa = np.maximum(np.diag(Q), np.finfo(np.float64).tiny)
    previous = None
    for _ in range(max_iter):
        shifted = s - (Q @ s + c) / kappa
        upper = shifted > bound
        lower = shifted < -bound
        key = (upper.tobytes(), lower.tobytes())
        if key == previous:
            break
        previous = key
        free = ~(upper | lower)
        new = np.where(upper, bound, np.where(lower, -bound, 0.0))
        if free.any():
            rhs = -(c[free] + Q[np.ix_(free, ~free)] @ new[~free])
            new[free] = np.linalg.lstsq(Q[np.ix_(free, free)], rhs, rcond=1e-12)[0]
        s = new
    return np.clip(s, -bound, bound)


@dataclass(eq=False)
class FitBlock:
    """One per-scale term: ``smooth(x) + reg_weight * ||assign @ x - target||_1``."""

    smooth: Callable[[np.ndarray], float]
    smooth_grad: Callable[[np.ndarray], np.ndarray]
    metric: Callable[[np.ndarray], np.ndarray]
    assign: np.ndarray
    target: float
    reg_weight: float
    _p_assign_t: np.ndarray = field(init=False, repr=False)
    _gram: np.ndarray = field(init=False, repr=False)
    _dual: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.assign = np.asarray(self.assign, dtype=np.float64)
        self._p_assign_t = self.metric(self.assign.T.copy())
        gram = self.assign @ self._p_assign_t
        self._gram = 0.5 * (gram + gram.T)
        self._dual = np.zeros(self.assign.shape[0])

    def reg(self, x) -> float:
        if self.assign.shape[0] == 0:
            return 0.0
        return self.reg_weight * float(np.sum(np.abs(self.assign @ x - self.target)))

    def prox_step(self, y, grad, tau):
        """Return ``(z, u)`` with ``z = y - tau P u`` and ``u = g + A^T s``."""
        p_grad = self.metric(grad)
        if self.assign.shape[0] == 0:
            return y - tau * p_grad, grad
        resid = self.assign @ y - self.target
        lin = tau * (self.assign @ p_grad) - resid
        s = box_qp(tau * self._gram, lin, self.reg_weight, start=self._dual)
        self._dual = s
        z = y - tau * (p_grad + self._p_assign_t @ s)
        return z, grad + self.assign.T @ s


def scale_aware_blocks(objective: ScaleAwareObjective) -> list[FitBlock]:
    blocks = []
    for mean, approx, assign, target in zip(objective.means, objective.approxes,
                                            objective.assignments, objective.targets):
        n_pix = mean.shape[0]
        if approx is None:
            blocks.append(FitBlock(lambda x: 0.0, np.zeros_like, lambda v: v, assign, target,
                                   objective.reg_weight))
            continue
        on = np.zeros(n_pix, dtype=bool)
        on[approx.selected] = True
        off_scale = 0.5 * (float(np.max(approx.signed_values)) + approx.jitter)

        def metric(v, approx=approx, on=on, off_scale=off_scale):
            out = off_scale * v
            out[on] = 0.5 * approx.apply(v[on])
            return out

        def smooth(x, mean=mean, approx=approx):
            return approx.quadratic_form(approx.restrict(x - mean))

        def smooth_grad(x, mean=mean, approx=approx, on=on):
            g = np.zeros_like(x)
            g[on] = 2.0 * approx.solve(approx.restrict(x - mean))
            return g

        blocks.append(FitBlock(smooth, smooth_grad, metric, assign, target,
                               objective.reg_weight))
    return blocks


def l2_blocks(targets) -> list[FitBlock]:
    """Squared-error blocks, one per target map, without a regularizer."""
    blocks = []
    for target in targets:
        target = np.asarray(target, dtype=np.float64)

        def smooth(x, target=target):
            diff = x - target
            return float(diff @ diff)

        def smooth_grad(x, target=target):
            return 2.0 * (x - target)

        blocks.append(FitBlock(smooth, smooth_grad, lambda v: 0.5 * v,
                               np.zeros((0, target.shape[0])), 0.0, 0.0))
    return blocks


@dataclass(frozen=True, eq=False)
class FitResult:
    values: list
    trace: list  # LossBreakdown per accepted iteration, starting at x0
    iterations: int
    backtracks: int


def _breakdown(blocks, xs) -> LossBreakdown:
    smooth = tuple(float(b.smooth(x)) for b, x in zip(blocks, xs))
    reg = tuple(b.reg(x) for b, x in zip(blocks, xs))
    return LossBreakdown(smooth, reg, math.fsum(smooth) + math.fsum(reg))


def fit_blocks(blocks, x0=None, iterations=500, step=1.0, shrink=0.5,
               max_backtracks=50) -> FitResult:
    """Minimise the sum of ``blocks`` starting from ``x0`` (zeros by default).

    Raises :class:`FitDivergedError` carrying the trace so far if no step in
    ``max_backtracks`` halvings satisfies the sufficient-decrease test.
    """
    iterations = check_int(iterations, "iterations", min_val=1)
    step = check_scalar(step, "step", min_val=0, include_min=False)
    shrink = check_scalar(shrink, "shrink", min_val=0, max_val=1, include_min=False,
                          include_max=False)
    max_backtracks = check_int(max_backtracks, "max_backtracks", min_val=0)
    if x0 is None:
        x0 = [np.zeros(b.assign.shape[1]) for b in blocks]
    x = [np.array(v, dtype=np.float64) for v in x0]
    y = [v.copy() for v in x]
    current = _breakdown(blocks, x)
    trace = [current]
    theta, tau, total_bt = 1.0, step, 0
    done = 0
    for done in range(1, iterations + 1):
        grads = [b.smooth_grad(v) for b, v in zip(blocks, y)]
        smooth_y = math.fsum(b.smooth(v) for b, v in zip(blocks, y))
        slack = 1e-12 * (1.0 + abs(smooth_y))
        for _ in range(max_backtracks + 1):
            steps = [b.prox_step(v, g, tau) for b, v, g in zip(blocks, y, grads)]
            z = [s[0] for s in steps]
            # quadratic upper model of the smooth part at z
            model = smooth_y
            for (zi, ui), yi, gi in zip(steps, y, grads):
                diff = zi - yi
                model += float(gi @ diff) - 0.5 * float(diff @ ui)
            if math.fsum(b.smooth(v) for b, v in zip(blocks, z)) <= model + slack:
                break
            tau *= shrink
            total_bt += 1
        else:
            raise FitDivergedError(
                f"no sufficient decrease after {max_backtracks} backtracks "
                f"(iteration {done}, step {tau:.3g})", trace)
        stalled = all(np.array_equal(zi, yi) for zi, yi in zip(z, y))
        candidate = _breakdown(blocks, z)
        theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
        previous = x
        if candidate.total <= current.total:
            x, current = z, candidate
        y = [xi + (theta / theta_next) * (zi - xi) + ((theta - 1.0) / theta_next) * (xi - pi)
             for xi, zi, pi in zip(x, z, previous)]
        theta = theta_next
        trace.append(current)
        if stalled:
            break
    return FitResult(values=x, trace=trace, iterations=done, backtracks=total_bt)
