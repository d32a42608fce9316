"""Input validation helpers shared by the estimator-style classes."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def check_matrix(x, name: str, dtype=np.float64) -> np.ndarray:
    """Coerce to a 2-D array of `dtype` and require finite entries."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected 2-d array, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_vector(x, name: str, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1:
        raise ValueError(f"{name}: expected 1-d array, got ndim={arr.ndim}")
    return arr


def check_binary_labels(y, name: str = "labels") -> np.ndarray:
    arr = check_vector(y, name)
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError(f"{name}: labels must be 0 or 1")
    return arr


def check_in(value, options: Sequence, name: str):
    if value not in options:
        raise ValueError(f"{name}: {value!r} not in {list(options)}")
    return value


def check_positive(value: float, name: str, strict: bool = True) -> float:
    value = float(value)
    if (value <= 0) if strict else (value < 0):
        raise ValueError(f"{name}: must be {'> 0' if strict else '>= 0'}, got {value}")
    return value


def check_same_length(a, b, name_a: str, name_b: str) -> None:
    if len(a) != len(b):
        raise ValueError(f"{name_a} and {name_b} must have equal length ({len(a)} vs {len(b)})")
