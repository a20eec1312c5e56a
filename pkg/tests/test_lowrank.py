from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sacc.density import DensityField
from sacc.exceptions import GridMismatchError, SingularFormError
from sacc.lowrank import (
    RankMApprox,
    neg_log_likelihood,
    select_pixels,
    truncate_cov,
    truncation_error,
)
from sacc.oracles import dense_quadratic_form, eckart_young_error


def _psd(rng, n, rank=None):
    a = rng.standard_normal((n, rank or n))
    return a @ a.T


def test_select_examples():
    assert list(select_pixels([4, 3, 2, 1], 0.8)) == [0, 1, 2]
    assert list(select_pixels([0, 0, 5, 0], 0.99)) == [2]
    assert list(select_pixels([0, 0, 5, 0], 0.01)) == [2]
    assert len(select_pixels(np.ones(10), 0.8)) == 9


def test_select_sorted_and_tie_break():
    assert list(select_pixels([1, 3, 1, 3], 0.5)) == [1, 3]
    # ties go to the lower index
    assert list(select_pixels([1, 1, 1, 1], 0.6)) == [0, 1, 2]


def test_select_errors():
    with pytest.raises(ValueError, match="no variance mass"):
        select_pixels([0.0, 0.0])
    with pytest.raises(ValueError):
        select_pixels([1.0, -1.0])
    with pytest.raises(ValueError):
        select_pixels([1.0], 1.0)


@given(values=st.lists(st.floats(0, 10), min_size=1, max_size=30),
       threshold=st.floats(0.05, 0.95))
def test_select_is_smallest_prefix(values, threshold):
    var = np.array(values)
    if var.sum() <= 0:
        return
    sel = select_pixels(var, threshold)
    assert np.all(np.diff(sel) > 0)
    kept = var[sel].sum()
    assert kept > threshold * var.sum() or len(sel) == len(var)
    # dropping the smallest selected entry falls to or below the threshold
    if len(sel) > 1:
        assert kept - var[sel].min() <= threshold * var.sum() * (1 + 1e-12)


@given(seed=st.integers(0, 10_000))
def test_select_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    var = rng.exponential(size=20)
    perm = rng.permutation(20)
    a = set(select_pixels(var, 0.8).tolist())
    b = set(perm[select_pixels(var[perm], 0.8)].tolist())
    assert a == b


def test_truncate_full_rank_reconstructs():
    rng = np.random.default_rng(0)
    cov = _psd(rng, 12)
    approx = truncate_cov(cov, np.arange(12))
    np.testing.assert_allclose(approx.reconstruct(), cov, rtol=1e-10, atol=1e-10 * np.abs(cov).max())


def test_truncate_diagonal_example():
    approx = truncate_cov(np.diag([9.0, 4.0, 1.0]), [0, 1, 2], rank=2)
    assert truncation_error(np.diag([9.0, 4.0, 1.0]), approx) == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(approx.singular_values, [9.0, 4.0])


def test_truncate_random_psd_eckart_young():
    rng = np.random.default_rng(1)
    cov = _psd(rng, 20)
    approx = truncate_cov(cov, np.arange(20), rank=5)
    sv = np.linalg.svd(cov, compute_uv=False)
    assert truncation_error(cov, approx) == pytest.approx(eckart_young_error(sv, 5), rel=1e-8)


def test_truncate_restricts_to_selected():
    rng = np.random.default_rng(2)
    cov = _psd(rng, 10)
    sel = [1, 4, 7]
    approx = truncate_cov(cov, sel)
    np.testing.assert_allclose(approx.reconstruct(), cov[np.ix_(sel, sel)], rtol=1e-10)
    assert approx.n_pixels == 10


@given(seed=st.integers(0, 10_000))
def test_truncate_invariants(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 15))
    cov = _psd(rng, n) - 0.2 * np.eye(n)  # allow negative eigenvalues too
    approx = truncate_cov(cov, np.arange(n))
    c = approx.singular_values
    assert np.all(c >= 0) and np.all(np.diff(c) <= 0)
    for vecs in (approx.left_vectors, approx.right_vectors):
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-8)
    errors = [truncation_error(cov, truncate_cov(cov, np.arange(n), rank=r))
              for r in range(1, n + 1)]
    assert all(b <= a + 1e-10 for a, b in zip(errors, errors[1:]))


def test_truncate_errors():
    with pytest.raises(ValueError, match="exceeds"):
        truncate_cov(np.eye(3), [0, 1], rank=3)
    with pytest.raises(ValueError, match="symmetric"):
        truncate_cov(np.array([[1.0, 2.0], [0.0, 1.0]]), [0, 1])
    with pytest.raises(ValueError):
        truncate_cov(np.ones((2, 3)), [0, 1])


def test_nll_zero_at_mean():
    rng = np.random.default_rng(3)
    cov = _psd(rng, 9)
    approx = truncate_cov(cov, [0, 2, 5, 8])
    mean = rng.standard_normal(9)
    pred = DensityField(1, 3, 3, mean)
    assert neg_log_likelihood(pred, mean, approx) == 0.0


def test_nll_identity_form():
    approx = RankMApprox(selected=[0, 1], singular_values=[0.5, 0.5], left_vectors=np.eye(2),
                         right_vectors=np.eye(2), jitter=0.5, n_pixels=2)
    pred = DensityField(1, 2, 1, [3.0, 4.0])
    assert neg_log_likelihood(pred, np.zeros(2), approx) == pytest.approx(25.0, rel=1e-15)


def test_nll_matches_dense_solve():
    rng = np.random.default_rng(4)
    cov = _psd(rng, 15, rank=6)
    for rank in (15, 6, 3):
        approx = truncate_cov(cov, np.arange(15), rank=rank)
        d = rng.standard_normal(15)
        ref = dense_quadratic_form(approx.reconstruct(), approx.jitter, d)
        got = neg_log_likelihood(DensityField(1, 5, 3, d), np.zeros(15), approx)
        assert got == pytest.approx(ref, rel=1e-9)


@given(seed=st.integers(0, 10_000), c=st.floats(-100, 100))
def test_nll_quadratic_scaling(seed, c):
    rng = np.random.default_rng(seed)
    approx = truncate_cov(_psd(rng, 8) + np.eye(8), np.arange(8), rank=4)
    d = rng.standard_normal(8)
    base = approx.quadratic_form(d)
    assert base >= 0
    assert approx.quadratic_form(c * d) == pytest.approx(c * c * base, rel=1e-10, abs=1e-300)


def test_nll_grid_mismatch():
    approx = truncate_cov(np.eye(4), np.arange(4))
    with pytest.raises(GridMismatchError):
        neg_log_likelihood(DensityField(1, 3, 1, np.zeros(3)), np.zeros(3), approx)


def test_nll_singular_form():
    approx = truncate_cov(np.diag([2.0, 1.0, 0.0]), np.arange(3), rank=2, jitter=0.0)
    with pytest.raises(SingularFormError, match="singular quadratic form"):
        approx.quadratic_form(np.ones(3))


def test_solve_and_apply_are_inverse():
    rng = np.random.default_rng(5)
    approx = truncate_cov(_psd(rng, 10), np.arange(10), rank=4)
    v = rng.standard_normal(10)
    np.testing.assert_allclose(approx.apply(approx.solve(v)), v, rtol=1e-6, atol=1e-8)


def test_batched_quadratic_form():
    rng = np.random.default_rng(6)
    approx = truncate_cov(_psd(rng, 6), np.arange(6), rank=3)
    batch = rng.standard_normal((6, 4))
    expected = [approx.quadratic_form(batch[:, k]) for k in range(4)]
    np.testing.assert_allclose(approx.quadratic_form(batch), expected, rtol=1e-12)


@pytest.mark.slow
def test_nll_evaluation_quadratic_in_m():
    from .timing import nll_times, loglog_slope

    sizes = (64, 128, 256, 512)
    assert 1.7 <= loglog_slope(sizes, nll_times(sizes)) <= 2.3
