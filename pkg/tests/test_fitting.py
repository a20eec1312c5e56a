from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sacc.annotation import AnnotatedScene, ScaleParams
from sacc.exceptions import FitDivergedError
from sacc.fitting import FitBlock, box_qp, fit_blocks, l2_blocks, scale_aware_blocks
from sacc.loss import ScaleAwareObjective, precompute_terms


def _kkt_violation(Q, c, bound, s):
    grad = Q @ s + c
    viol = 0.0
    for gi, si in zip(grad, s):
        if si >= bound - 1e-12:
            viol = max(viol, gi)  # at the upper bound the gradient must be <= 0
        elif si <= -bound + 1e-12:
            viol = max(viol, -gi)
        else:
            viol = max(viol, abs(gi))
    return viol


@given(seed=st.integers(0, 10_000), bound=st.floats(0.1, 5.0))
def test_box_qp_kkt(seed, bound):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    a = rng.standard_normal((n, n + 2))
    Q = a @ a.T
    c = 3.0 * rng.standard_normal(n)
    s = box_qp(Q, c, bound)
    assert np.all(np.abs(s) <= bound)
    assert _kkt_violation(Q, c, bound, s) <= 1e-8 * (1 + np.abs(c).max())


def test_box_qp_singular_and_empty():
    Q = np.array([[1.0, 1.0], [1.0, 1.0]])
    s = box_qp(Q, np.array([-1.0, -1.0]), 10.0)
    assert s.sum() == pytest.approx(1.0)
    assert box_qp(np.zeros((0, 0)), np.zeros(0), 1.0).shape == (0,)


def _objective(seed, side=8):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, side, size=(int(rng.integers(1, 4)), 2))
    scene = AnnotatedScene(side, side, pos, pos, np.full(len(pos), 8.0))
    params = ScaleParams.halving(8.0, 8.0, weights=(0.5, 0.5))
    return ScaleAwareObjective(scene, params, precompute_terms(scene, params)), rng


@given(seed=st.integers(0, 500))
def test_prox_step_minimises_model(seed):
    obj, rng = _objective(seed)
    block = scale_aware_blocks(obj)[0]
    y = obj.means[0] + 0.05 * rng.standard_normal(obj.means[0].shape)
    g = block.smooth_grad(y)
    tau = 0.7
    z, _ = block.prox_step(y, g, tau)
    # z minimises g.(x-y) + |x-y|^2_{P^-1} / (2 tau) + reg(x); P^-1 applied via a dense inverse
    n = y.shape[0]
    pmat = np.column_stack([block.metric(e) for e in np.eye(n)])
    pinv = np.linalg.inv(pmat)

    def model(x):
        d = x - y
        return g @ d + d @ pinv @ d / (2 * tau) + block.reg(x)

    base = model(z)
    for _ in range(30):
        direction = rng.standard_normal(n)
        for eps in (1e-3, 1e-5):
            assert model(z + eps * direction) >= base - 1e-9 * (1 + abs(base))


@given(seed=st.integers(0, 500))
def test_fit_trace_monotone(seed):
    obj, _ = _objective(seed)
    result = fit_blocks(scale_aware_blocks(obj), iterations=60)
    totals = [b.total for b in result.trace]
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    assert result.trace[0].total == pytest.approx(obj.value([np.zeros_like(m)
                                                             for m in obj.means]))
    assert totals[-1] == pytest.approx(obj.value(result.values), rel=1e-12)


def test_fit_reduces_loss_substantially():
    obj, _ = _objective(3, side=12)
    result = fit_blocks(scale_aware_blocks(obj), iterations=300)
    assert result.trace[-1].total < 1e-3 * result.trace[0].total


def test_l2_single_step():
    target = np.linspace(0.0, 1.0, 20)
    result = fit_blocks(l2_blocks([target]), iterations=50)
    np.testing.assert_allclose(result.values[0], target, atol=1e-12)
    assert result.iterations <= 3


def test_divergence_raises_with_trace():
    # a gradient pointing uphill can never satisfy the decrease test
    block = FitBlock(lambda x: float(x @ x), lambda x: -2.0 * x - 1.0, lambda v: v,
                     np.zeros((0, 3)), 0.0, 0.0)
    with pytest.raises(FitDivergedError) as info:
        fit_blocks([block], x0=[np.ones(3)], max_backtracks=5)
    assert len(info.value.trace) == 1
    assert info.value.trace[0].total == pytest.approx(3.0)


def test_fit_argument_validation():
    blocks = l2_blocks([np.zeros(3)])
    with pytest.raises(ValueError):
        fit_blocks(blocks, iterations=0)
    with pytest.raises(ValueError):
        fit_blocks(blocks, shrink=1.0)
    with pytest.raises(ValueError):
        fit_blocks(blocks, step=0.0)
