"""Small input-validation helpers shared across modules."""

from __future__ import annotations

import numbers

import numpy as np


def check_scalar(value, name, *, min_val=None, max_val=None,
                 include_min=True, include_max=True):
    """Return ``value`` as float after a range check."""
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    if min_val is not None:
        bad = value < min_val if include_min else value <= min_val
        if bad:
            op = ">=" if include_min else ">"
            raise ValueError(f"{name} must be {op} {min_val}, got {value}")
    if max_val is not None:
        bad = value > max_val if include_max else value >= max_val
        if bad:
            op = "<=" if include_max else "<"
            raise ValueError(f"{name} must be {op} {max_val}, got {value}")
    return value


def check_int(value, name, *, min_val=None):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if min_val is not None and value < min_val:
        raise ValueError(f"{name} must be >= {min_val}, got {value}")
    return value


def check_scale_index(scale_index, num_scales):
    scale_index = check_int(scale_index, "scale_index")
    if not 1 <= scale_index <= num_scales:
        raise ValueError(
            f"scale_index must be in [1, {num_scales}], got {scale_index}")
    return scale_index


def check_points(points, name="points"):
    """Coerce to a float64 (N, 2) array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape (N, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_vector(values, name, *, length=None):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def frozen(arr):
    """Return a read-only view so immutable containers stay immutable."""
    arr = np.asarray(arr)
    view = arr.view()
    view.flags.writeable = False
    return view
