"""Input validation helpers.

Thin checks that normalize user input to float64 numpy arrays and raise
the toolkit's own exceptions with readable messages. Used at the public
API boundaries; internal code trusts its inputs.
"""

import numpy as np

from .errors import DimMismatch, ShapeMismatch


def as_vector(x, name="x", dim=None):
    """Coerce to a finite 1-D float64 array, optionally of fixed length."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ShapeMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimMismatch(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ShapeMismatch(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name="X", cols=None, allow_empty=False):
    """Coerce to a finite 2-D float64 array, optionally with a fixed column count."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ShapeMismatch(f"{name} has no rows")
    if cols is not None and arr.shape[1] != cols:
        raise DimMismatch(f"{name} must have {cols} columns, got {arr.shape[1]}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ShapeMismatch(f"{name} contains non-finite entries")
    return arr


def check_positive(value, name):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_in_range(value, lo, hi, name):
    if not (lo <= value <= hi):
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return value
