"""Input validation shared by the estimator wrappers and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import CodeError, DimensionError, ParameterError


def check_matrix(X, name: str = "X", n_cols: int | None = None) -> np.ndarray:
    """Finite 2-D float64 array; ``n_cols`` pins the column count."""
    try:
        X = check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=name)
    except ValueError as exc:
        raise DimensionError(f"{name}: {exc}") from None
    if n_cols is not None and X.shape[1] != n_cols:
        raise DimensionError(f"{name} has {X.shape[1]} columns, expected {n_cols}")
    return X


def check_codes(codes, K: int, M: int | None = None) -> np.ndarray:
    """Integer ``(N, M)`` code array with entries in ``[0, K)``."""
    c = np.asarray(codes)
    if c.ndim != 2 or (M is not None and c.shape[1] != M):
        raise DimensionError(f"codes must have shape (N, {M if M is not None else 'M'}), got {c.shape}")
    if c.size and not np.issubdtype(c.dtype, np.integer):
        raise CodeError("codes must be integers")
    if c.size and (c.min() < 0 or c.max() >= K):
        raise CodeError(f"codes must lie in [0, {K})")
    return c.astype(np.int64)


def check_fraction(value, name: str, low_open: bool = True) -> float:
    v = float(value)
    ok = (0.0 < v <= 1.0) if low_open else (0.0 <= v <= 1.0)
    if not ok:
        raise ParameterError(f"{name} must be in {'(0' if low_open else '[0'}, 1], got {value}")
    return v


def check_positive(value, name: str, integer: bool = False):
    v = int(value) if integer else float(value)
    if integer and v != value:
        raise ParameterError(f"{name} must be an integer, got {value}")
    if not v > 0:
        raise ParameterError(f"{name} must be positive, got {value}")
    return v


def check_range(value, name: str, low, high):
    if not low <= value <= high:
        raise ParameterError(f"{name} must be in [{low}, {high}], got {value}")
    return value
