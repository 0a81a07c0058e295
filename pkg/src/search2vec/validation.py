"""Input validation helpers shared by the estimator classes."""

from __future__ import annotations

import numpy as np


def check_vector(x, name: str = "x") -> np.ndarray:
    """Coerce to a 1-d float64 array with finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_matrix(x, name: str = "X") -> np.ndarray:
    """Coerce to a 2-d float64 array with finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr
