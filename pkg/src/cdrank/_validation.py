"""Input validation helpers used by the estimators and module functions."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


def check_matrix(X, name: str = "X", *, n_cols: int | None = None) -> np.ndarray:
    """Coerce X to a 2-D float64 array with finite entries."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} has no rows")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise ValueError(f"{name} has {arr.shape[1]} columns, expected {n_cols}")
    return arr


def check_vector(x, name: str = "x", *, length: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if length is not None and arr.size != length:
        raise ValueError(f"{name} has length {arr.size}, expected {length}")
    return arr


def check_binary_labels(y, name: str = "y", *, length: int | None = None) -> np.ndarray:
    arr = check_vector(y, name, length=length)
    if not np.all(np.isin(arr, (0.0, 1.0))):
        raise ValueError(f"{name} must contain only 0/1 labels")
    return arr


def check_in(value, options, name: str):
    if value not in options:
        raise ValueError(f"{name} must be one of {sorted(options)}, got {value!r}")
    return value


def as_rng(seed) -> np.random.Generator:
    """Build a Generator from an int seed, passing Generators through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_is_fitted(estimator, attribute: str):
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first"
        )
