"""Small input checks shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_points(points, name="points", dim=2):
    """Return ``points`` as a finite float array of shape ``(n, dim)``."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == dim:
        arr = arr.reshape(1, dim)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have shape (n, {dim}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_values(values, n, name="values"):
    arr = check_points(values, name)
    if len(arr) != n:
        raise ValueError(f"{name} has {len(arr)} rows, expected {n}")
    return arr


def check_positive(value, name):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be positive")
    return value
