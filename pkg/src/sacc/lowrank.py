"""Top-M pixel selection, truncated SVD of the covariance, and the rank-M NLL.

The covariance is first restricted to the pixels holding most of the
variance mass, then truncated to its leading singular triples. The
quadratic form is evaluated through the stored factors:

    (S + lam I)^-1 = U diag(1 / (e + lam)) U^T + (I - U U^T) / lam

where ``e`` are the signed eigenvalues (``c_i`` times the sign linking
``u_i`` and ``v_i``). After factorisation one evaluation costs O(M r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_int, check_scalar, check_vector, frozen
from .density import DensityField
from .exceptions import GridMismatchError, SingularFormError

DEFAULT_MASS_THRESHOLD = 0.8
DEFAULT_REL_JITTER = 1e-6


def select_pixels(diag_var, mass_threshold=DEFAULT_MASS_THRESHOLD) -> np.ndarray:
    """Smallest set of highest-variance pixels holding > ``mass_threshold`` of the total.

    Pixels are ranked by variance (descending, ties to the lower index); the
    returned indices are sorted ascending.
    """
    var = check_vector(diag_var, "diag_var")
    mass_threshold = check_scalar(mass_threshold, "mass_threshold", min_val=0, max_val=1,
                                  include_min=False, include_max=False)
    if np.any(var < 0):
        raise ValueError("variances must be >= 0")
    total = var.sum()
    if not total > 0:
        raise ValueError("no variance mass")
    order = np.lexsort((np.arange(var.shape[0]), -var))
    cum = np.cumsum(var[order])
    above = np.flatnonzero(cum > mass_threshold * total)
    # cumulative round-off can leave the last partial sum a hair under total
    m = int(above[0]) + 1 if above.size else var.shape[0]
    return np.sort(order[:m])


@dataclass(frozen=True, eq=False)
class RankMApprox:
    """Leading singular triples of the covariance restricted to ``selected``."""

    selected: np.ndarray
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray
    jitter: float
    n_pixels: int

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=np.intp)
        if sel.ndim != 1 or sel.shape[0] < 1:
            raise ValueError("selected must be a non-empty index list")
        if np.any(np.diff(sel) <= 0):
            raise ValueError("selected indices must be strictly increasing")
        c = np.asarray(self.singular_values, dtype=np.float64)
        if np.any(c < 0) or np.any(np.diff(c) > 0):
            raise ValueError("singular values must be nonnegative and nonincreasing")
        u = np.asarray(self.left_vectors, dtype=np.float64)
        v = np.asarray(self.right_vectors, dtype=np.float64)
        if u.shape != (sel.shape[0], c.shape[0]) or v.shape != u.shape:
            raise ValueError("singular vectors must be |L| x rank")
        object.__setattr__(self, "selected", frozen(sel.copy()))
        object.__setattr__(self, "singular_values", frozen(c.copy()))
        object.__setattr__(self, "left_vectors", frozen(u.copy()))
        object.__setattr__(self, "right_vectors", frozen(v.copy()))
        object.__setattr__(self, "jitter", float(self.jitter))
        signs = np.where(np.einsum("ij,ij->j", u, v) < 0, -1.0, 1.0)
        object.__setattr__(self, "_signed", frozen(c * signs))

    @property
    def rank(self) -> int:
        return int(self.singular_values.shape[0])

    @property
    def size(self) -> int:
        """Number of selected pixels |L|."""
        return int(self.selected.shape[0])

    @property
    def signed_values(self) -> np.ndarray:
        """Eigenvalues of the (symmetric) truncation: ``c_i * sign(u_i . v_i)``."""
        return self._signed

    def reconstruct(self) -> np.ndarray:
        """Dense |L| x |L| truncation ``sum_i c_i u_i v_i^T``."""
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T

    def check_invertible(self) -> None:
        shifted = self.signed_values + self.jitter
        if np.any(shifted <= 0) or (self.rank < self.size and self.jitter <= 0):
            raise SingularFormError("singular quadratic form")

    def restrict(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != self.n_pixels:
            raise GridMismatchError(
                f"field has {values.shape[0]} pixels, approximation expects {self.n_pixels}")
        return values[self.selected]

    def solve(self, rhs) -> np.ndarray:
        """Apply ``(S_hat + lam I)^-1`` to vectors on ``L`` (shape (M,) or (M, B))."""
        self.check_invertible()
        u = self.left_vectors
        proj = u.T @ rhs
        inv = 1.0 / (self.signed_values + self.jitter)
        out = u @ (inv[:, None] * proj if proj.ndim == 2 else inv * proj)
        if self.rank < self.size:
            out += (rhs - u @ proj) / self.jitter
        return out

    def apply(self, vec) -> np.ndarray:
        """Apply ``S_hat + lam I`` to vectors on ``L``."""
        u = self.left_vectors
        proj = u.T @ vec
        vals = self.signed_values
        scaled = vals[:, None] * proj if proj.ndim == 2 else vals * proj
        return u @ scaled + self.jitter * vec

    def quadratic_form(self, dbar) -> np.ndarray | float:
        """``d^T (S_hat + lam I)^-1 d`` for d of shape (M,) or a batch (M, B)."""
        self.check_invertible()
        dbar = np.asarray(dbar, dtype=np.float64)
        proj = self.left_vectors.T @ dbar
        inv = 1.0 / (self.signed_values + self.jitter)
        val = inv @ (proj * proj)
        if self.rank < self.size:
            # residual outside span(U); clipped against round-off
            resid = np.sum(dbar * dbar, axis=0) - np.sum(proj * proj, axis=0)
            val = val + np.maximum(resid, 0.0) / self.jitter
        return float(val) if dbar.ndim == 1 else val


def _diagnostics(mat):
    try:
        s = np.linalg.svd(mat, compute_uv=False)
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    except np.linalg.LinAlgError:
        cond = np.nan
    return (f"shape={mat.shape}, finite={bool(np.all(np.isfinite(mat)))}, "
            f"max|a|={np.nanmax(np.abs(mat)) if mat.size else 0:.3g}, cond={cond:.3g}")


def truncate_cov(cov, selected, rank=None, jitter=None,
                 rel_jitter=DEFAULT_REL_JITTER) -> RankMApprox:
    """Restrict ``cov`` to ``selected`` and keep the leading ``rank`` singular triples.

    The restricted matrix is symmetric, so its SVD is read off a symmetric
    eigendecomposition: ``c = |e|``, ``u`` the eigenvector and
    ``v = sign(e) u``. ``jitter=None`` uses ``rel_jitter * c_max``.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"cov must be square, got {cov.shape}")
    selected = np.asarray(selected, dtype=np.intp)
    sub = cov[np.ix_(selected, selected)]
    scale = np.max(np.abs(sub)) if sub.size else 0.0
    if not np.allclose(sub, sub.T, rtol=1e-10, atol=1e-12 * scale):
        raise ValueError("cov must be symmetric")
    size = selected.shape[0]
    rank = size if rank is None else check_int(rank, "rank", min_val=1)
    if rank > size:
        raise ValueError(f"rank {rank} exceeds number of selected pixels {size}")
    try:
        evals, evecs = np.linalg.eigh(0.5 * (sub + sub.T))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"SVD did not converge ({_diagnostics(sub)})") from exc
    order = np.lexsort((np.arange(size), -np.abs(evals)))[:rank]
    c = np.abs(evals[order])
    u = evecs[:, order]
    signs = np.where(evals[order] < 0, -1.0, 1.0)
    if jitter is None:
        jitter = rel_jitter * (float(c[0]) if c.size else 0.0)
    return RankMApprox(selected=selected, singular_values=c, left_vectors=u,
                       right_vectors=u * signs, jitter=float(jitter),
                       n_pixels=cov.shape[0])


def truncation_error(cov, approx: RankMApprox) -> float:
    """Frobenius norm of ``Sigma_L - Sigma_hat``."""
    sub = np.asarray(cov)[np.ix_(approx.selected, approx.selected)]
    return float(np.linalg.norm(sub - approx.reconstruct(), "fro"))


def neg_log_likelihood(pred: DensityField, mean, approx: RankMApprox) -> float:
    """Rank-M quadratic form ``dbar_L^T (S_hat + lam I)^-1 dbar_L``, ``dbar = pred - mean``."""
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape[0] != pred.n_pixels or approx.n_pixels != pred.n_pixels:
        raise GridMismatchError(
            f"prediction has {pred.n_pixels} pixels, mean {mean.shape[0]}, "
            f"approximation {approx.n_pixels}")
    dbar = approx.restrict(pred.values - mean)
    return approx.quadratic_form(dbar)
