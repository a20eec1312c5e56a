"""Ground-truth density rendering and closed-form moments of the noisy model.

A head at annotated position ``c`` contributes ``N(x | c - eps, beta I)`` to
the density, with annotation noise ``eps ~ N(0, alpha I)``. Taking
expectations over ``eps`` gives

* mean:        ``w N(q | 0, (alpha + beta) I)``
* second moment between pixels ``j`` and ``k``::

      E[phi(x_j) phi(x_k)] = N(x_j - x_k | 0, 2 beta I)
                             * N((q_j + q_k)/2 | 0, (beta/2 + alpha) I)

  (Gaussian product rule, then convolution with the noise law). At ``j == k``
  the first factor is ``1 / (4 pi beta)``.

Fields are stored flat in row-major order, ``j = y * width + x``, with pixel
centres at integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_int, check_scalar, check_scale_index, check_vector, frozen
from .annotation import AnnotatedScene, ScaleParams, rescale_annotations
from .exceptions import GridMismatchError, GridTooLargeError

DEFAULT_MAX_PIXELS = 4096


def gaussian_kernel_2d(q, variance):
    """Isotropic bivariate normal density ``N(q | 0, variance I)``.

    ``q`` may be a single 2-vector or any array with a trailing axis of 2.
    """
    variance = check_scalar(variance, "variance", min_val=0, include_min=False)
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 2:
        raise ValueError(f"q must have a trailing axis of length 2, got {q.shape}")
    sq = np.sum(q * q, axis=-1)
    out = np.exp(-sq / (2.0 * variance)) / (2.0 * math.pi * variance)
    return float(out) if out.ndim == 0 else out


def _axis_kernel(coords, centers, variance):
    """1-D normal factors, shape ``centers.shape + coords.shape``."""
    diff = coords - np.asarray(centers)[..., None]
    return np.exp(-diff * diff / (2.0 * variance)) / math.sqrt(2.0 * math.pi * variance)


def pixel_centers(width, height) -> np.ndarray:
    """(J, 2) array of pixel-centre coordinates in row-major order."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    return np.column_stack([xs.ravel(), ys.ravel()])


def kernel_sum(centers, variance, width, height, weights=None):
    """Sum of isotropic Gaussians evaluated on every pixel of a grid.

    ``centers`` is (N, 2) or batched (B, N, 2); the result is (J,) or (B, J).
    The 2-D kernel is evaluated as a product of 1-D factors, which keeps the
    cost at O(N (W + H) + N J) per batch element.
    """
    variance = check_scalar(variance, "variance", min_val=0, include_min=False)
    centers = np.asarray(centers, dtype=np.float64)
    batch_shape = centers.shape[:-2]
    if centers.shape[-2] == 0:
        return np.zeros(batch_shape + (width * height,))
    gx = _axis_kernel(np.arange(width, dtype=np.float64), centers[..., 0], variance)
    gy = _axis_kernel(np.arange(height, dtype=np.float64), centers[..., 1], variance)
    if weights is not None:
        gy = gy * np.asarray(weights, dtype=np.float64)[..., None]
    img = np.matmul(np.swapaxes(gy, -1, -2), gx)
    return img.reshape(batch_shape + (width * height,))


@dataclass(frozen=True, eq=False)
class DensityField:
    """Per-scale grid of density values (rendered or predicted).

    ``nonnegative`` marks rendered maps; predictions may go negative while
    being optimised.
    """

    scale_index: int
    width: int
    height: int
    values: np.ndarray
    nonnegative: bool = False

    def __post_init__(self):
        check_int(self.scale_index, "scale_index", min_val=1)
        check_int(self.width, "width", min_val=1)
        check_int(self.height, "height", min_val=1)
        values = check_vector(self.values, "values", length=self.width * self.height)
        if self.nonnegative and np.any(values < 0):
            raise ValueError("rendered density must be nonnegative")
        object.__setattr__(self, "values", frozen(values.copy()))

    @classmethod
    def zeros(cls, scale_index, width, height):
        return cls(scale_index, width, height, np.zeros(width * height))

    @property
    def grid(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def image(self) -> np.ndarray:
        """Values as a (height, width) array."""
        return self.values.reshape(self.height, self.width)

    def total(self) -> float:
        return float(self.values.sum())

    def with_values(self, values) -> "DensityField":
        return DensityField(self.scale_index, self.width, self.height, values)

    def check_same_grid(self, other) -> None:
        if (self.scale_index, self.width, self.height) != (
                other.scale_index, other.width, other.height):
            raise GridMismatchError(
                f"grid mismatch: scale {self.scale_index} {self.width}x{self.height} vs "
                f"scale {other.scale_index} {other.width}x{other.height}")


@dataclass(frozen=True, eq=False)
class GaussianApprox:
    """Mean, dense covariance and independently computed variances at one scale."""

    scale_index: int
    width: int
    height: int
    mean: np.ndarray
    cov: np.ndarray
    diag_var: np.ndarray

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


def _grid_for(scene, params, scale_index, grid):
    s = check_scale_index(scale_index, params.num_scales)
    if grid is None:
        grid = params.grid_shape(scene.width, scene.height, s)
    width, height = (check_int(v, "grid dimension", min_val=1) for v in grid)
    return s, width, height


def _scaled_positions(scene, params, s, use_noisy):
    return rescale_annotations(scene, s, params.downsample_factor, use_noisy=use_noisy)


def render_density(scene: AnnotatedScene, params: ScaleParams, scale_index,
                   use_noisy=True, grid=None) -> DensityField:
    """Unweighted sum of ``N(x | H_i, beta_s I)`` over heads on the scale-s grid."""
    s, width, height = _grid_for(scene, params, scale_index, grid)
    pos = _scaled_positions(scene, params, s, use_noisy)
    values = kernel_sum(pos, params.beta_at(s), width, height)
    return DensityField(s, width, height, values, nonnegative=True)


def render_batch(centers, variance, width, height, chunk=4096):
    """Render many position sets at once; ``centers`` is (B, N, 2)."""
    centers = np.asarray(centers, dtype=np.float64)
    out = np.empty((centers.shape[0], width * height))
    for start in range(0, centers.shape[0], chunk):
        out[start:start + chunk] = kernel_sum(centers[start:start + chunk], variance,
                                              width, height)
    return out


def mixture_density(scene: AnnotatedScene, params: ScaleParams, grids=None,
                    use_noisy=True) -> list[DensityField]:
    """Weighted components ``D_s = w_s * render_s`` for every scale."""
    if grids is None:
        grids = params.grids(scene.width, scene.height)
    if len(grids) != params.num_scales:
        raise ValueError(f"need {params.num_scales} grids, got {len(grids)}")
    fields = []
    for s, grid in enumerate(grids, start=1):
        base = render_density(scene, params, s, use_noisy=use_noisy, grid=grid)
        fields.append(DensityField(s, base.width, base.height,
                                   params.weight_at(s) * base.values, nonnegative=True))
    return fields


def approx_mean(scene: AnnotatedScene, params: ScaleParams, scale_index, grid=None,
                use_noisy=True) -> np.ndarray:
    """Expected density ``w_s sum_i N(q_i | 0, (alpha_s + beta_s) I)`` per pixel."""
    s, width, height = _grid_for(scene, params, scale_index, grid)
    pos = _scaled_positions(scene, params, s, use_noisy)
    variance = params.alpha_at(s) + params.beta_at(s)
    return params.weight_at(s) * kernel_sum(pos, variance, width, height)


def approx_variance(scene: AnnotatedScene, params: ScaleParams, scale_index, grid=None,
                    use_noisy=True) -> np.ndarray:
    """Per-pixel variance from the diagonal formula alone.

    ``sum_i [w^2 / (4 pi beta) N(q_i | 0, (beta/2 + alpha) I) - mu_i^2]``,
    evaluated with full 2-D kernels; shares no code with :func:`approx_cov`.
    """
    s, width, height = _grid_for(scene, params, scale_index, grid)
    pos = _scaled_positions(scene, params, s, use_noisy)
    alpha, beta, w = params.alpha_at(s), params.beta_at(s), params.weight_at(s)
    if pos.shape[0] == 0:
        return np.zeros(width * height)
    q = pixel_centers(width, height)[:, None, :] - pos[None, :, :]
    second = w * w / (4.0 * math.pi * beta) * gaussian_kernel_2d(q, beta / 2.0 + alpha)
    mu_i = w * gaussian_kernel_2d(q, alpha + beta)
    return np.sum(second - mu_i * mu_i, axis=1)


def _omega_axis(coords, center, beta, alpha):
    """One axis of ``E[phi(x_j) phi(x_k)]``: a (K, K) symmetric matrix."""
    a = coords[:, None]
    b = coords[None, :]
    spread = np.exp(-(a - b) ** 2 / (4.0 * beta)) / math.sqrt(4.0 * math.pi * beta)
    var_mid = beta / 2.0 + alpha
    mid = (a + b) / 2.0 - center
    return spread * np.exp(-mid * mid / (2.0 * var_mid)) / math.sqrt(2.0 * math.pi * var_mid)


def approx_cov(scene: AnnotatedScene, params: ScaleParams, scale_index, grid=None,
               use_noisy=True, max_pixels=DEFAULT_MAX_PIXELS) -> GaussianApprox:
    """Dense pixel covariance of ``D_s`` under annotation noise.

    ``Sigma_jk = sum_i [w^2 Omega_i(x_j, x_k) - mu_i(x_j) mu_i(x_k)]``. Both
    Omega factors separate over the x and y axes, so the per-head term is a
    Kronecker product of two small matrices; all heads are accumulated with
    a single matrix product.
    """
    s, width, height = _grid_for(scene, params, scale_index, grid)
    n_pix = width * height
    if n_pix > max_pixels:
        raise GridTooLargeError(
            f"grid has {n_pix} pixels, above the dense-covariance guard max_pixels={max_pixels}")
    pos = _scaled_positions(scene, params, s, use_noisy)
    alpha, beta, w = params.alpha_at(s), params.beta_at(s), params.weight_at(s)
    mean = approx_mean(scene, params, s, grid=(width, height), use_noisy=use_noisy)
    diag_var = approx_variance(scene, params, s, grid=(width, height), use_noisy=use_noisy)
    if pos.shape[0] == 0:
        cov = np.zeros((n_pix, n_pix))
        return GaussianApprox(s, width, height, mean, cov, diag_var)

    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    om_x = np.stack([_omega_axis(xs, c, beta, alpha) for c in pos[:, 0]])
    om_y = np.stack([_omega_axis(ys, c, beta, alpha) for c in pos[:, 1]])
    # sum_i kron(om_y[i], om_x[i]) laid out as (y1, x1, y2, x2)
    acc = (om_y.reshape(len(pos), -1).T @ om_x.reshape(len(pos), -1))
    acc = acc.reshape(height, height, width, width).transpose(0, 2, 1, 3)
    second = (w * w) * acc.reshape(n_pix, n_pix)

    gx = _axis_kernel(xs, pos[:, 0], alpha + beta)
    gy = _axis_kernel(ys, pos[:, 1], alpha + beta)
    mu_heads = w * (gy[:, :, None] * gx[:, None, :]).reshape(len(pos), n_pix)
    cov = second - mu_heads.T @ mu_heads
    cov = 0.5 * (cov + cov.T)
    return GaussianApprox(s, width, height, mean, cov, diag_var)


def format_density(field: DensityField) -> str:
    lines = [f"{field.scale_index} {field.width} {field.height}"]
    for row in field.image():
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_density(text: str) -> DensityField:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows or len(rows[0]) != 3:
        raise ValueError("density header must be 'scale width height'")
    scale_index, width, height = (int(v) for v in rows[0])
    body = rows[1:]
    if len(body) != height or any(len(r) != width for r in body):
        raise ValueError(f"expected {height} rows of {width} values")
    values = np.array(body, dtype=np.float64).ravel()
    return DensityField(scale_index, width, height, values)


def write_density(field: DensityField, path) -> None:
    Path(path).write_text(format_density(field))


def read_density(path) -> DensityField:
    return parse_density(Path(path).read_text())
