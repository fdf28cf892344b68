"""Input validation helpers shared by estimators, detectors and the harness."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array


def check_stream(X, dim: int | None = None) -> np.ndarray:
    """Return observations as a finite float64 array of shape (n_samples, dim).

    A 1-D input is read as a univariate stream when ``dim`` is 1 or None.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        if dim is None or dim == 1:
            X = X.reshape(-1, 1)
        elif X.shape[0] == dim:
            X = X.reshape(1, dim)
        else:
            raise ValueError(f"1-D input of length {X.shape[0]} is ambiguous for dim={dim}")
    X = check_array(X, dtype=np.float64, ensure_min_samples=0, ensure_all_finite=True)
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"expected observations of dimension {dim}, got {X.shape[1]}")
    return X


def check_point(x, dim: int) -> np.ndarray:
    """Return a single observation as a finite float64 vector of length ``dim``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (dim,):
        raise ValueError(f"expected a point of dimension {dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"observation must be finite, got {x}")
    return x


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_probability(alpha, name: str = "alpha") -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {alpha}")
    return alpha
