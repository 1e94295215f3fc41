"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_float_array(value, name, shape=None, ndim=None):
    """Coerce ``value`` to a C-contiguous float64 array and check its shape.

    Parameters
    ----------
    value : array-like
        Input to coerce.
    name : str
        Name used in error messages.
    shape : tuple of int, optional
        Exact shape required. Entries set to -1 are unconstrained.
    ndim : int, optional
        Required number of dimensions (ignored when ``shape`` is given).
    """
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if shape is not None:
        if arr.ndim != len(shape) or any(
            s != -1 and arr.shape[i] != s for i, s in enumerate(shape)
        ):
            raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    elif ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name, *, strict=True):
    """Validate a positive (or nonnegative) scalar and return it as float."""
    value = float(value)
    if strict and not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    if not strict and not value >= 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return value


def check_symmetric(mat, name, tol=1e-10):
    """Validate symmetry of a square matrix within ``tol`` and return it symmetrized."""
    mat = as_float_array(mat, name, ndim=2)
    if mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square, got {mat.shape}")
    if mat.size and np.max(np.abs(mat - mat.T)) > tol * (1.0 + np.max(np.abs(mat))):
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (mat + mat.T)


def check_increasing(values, name):
    """Validate a strictly increasing 1-d sequence."""
    arr = as_float_array(values, name, ndim=1)
    if arr.size > 1 and not np.all(np.diff(arr) > 0):
        raise ValueError(f"{name} must be strictly increasing")
    return arr
