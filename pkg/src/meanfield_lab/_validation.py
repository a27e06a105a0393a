"""Input validation helpers shared by the estimators and simulators."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_scalar(value, name, *, lower=None, upper=None, lower_inclusive=True,
                 upper_inclusive=True, allow_none=False):
    if value is None:
        if allow_none:
            return None
        raise ValueError(f"{name} must not be None")
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    if lower is not None:
        if value < lower or (value == lower and not lower_inclusive):
            op = ">=" if lower_inclusive else ">"
            raise ValueError(f"{name} must be {op} {lower}, got {value}")
    if upper is not None:
        if value > upper or (value == upper and not upper_inclusive):
            op = "<=" if upper_inclusive else "<"
            raise ValueError(f"{name} must be {op} {upper}, got {value}")
    return value


def check_int(value, name, *, lower=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if lower is not None and value < lower:
        raise ValueError(f"{name} must be >= {lower}, got {value}")
    return value


def check_points(x, d, name="x"):
    """Return ``x`` as a float64 array of shape (P, d) plus a flag telling
    whether the input was a single point."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1 and d > 1 or arr.ndim == 0
    if d == 1 and arr.ndim == 1:
        arr = arr[:, None]
        single = False
    if single:
        arr = arr.reshape(1, -1)
    arr = check_array(arr, ensure_2d=True, dtype=np.float64, ensure_min_samples=0,
                      input_name=name)
    if arr.shape[1] != d:
        raise ValueError(f"{name} must have {d} columns, got shape {arr.shape}")
    return arr, single


def check_positions(positions, d=None):
    arr = check_array(positions, dtype=np.float64, ensure_2d=True,
                      ensure_min_samples=1, input_name="positions")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"positions must have {d} columns, got {arr.shape[1]}")
    if arr.shape[1] not in (1, 2, 3):
        raise ValueError("only dimensions 1, 2 and 3 are supported")
    return arr


def wrap_unit(x):
    """Canonical representative in [0, 1)."""
    y = np.mod(x, 1.0)
    # mod can return exactly 1.0 for tiny negative inputs
    return np.where(y >= 1.0, 0.0, y)


def wrap_displacement(x):
    """Minimum-image displacement in [-1/2, 1/2]; odd under x -> -x bitwise."""
    x = np.asarray(x, dtype=np.float64)
    return x - np.rint(x)
