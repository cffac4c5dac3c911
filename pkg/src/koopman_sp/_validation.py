"""Input validation helpers for the estimator API."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DomainError


def check_states(X) -> np.ndarray:
    """Validate an array of planar states, returning a float (n, 2) array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and X.size == 2:
        X = X[None, :]
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 2:
        raise DomainError(f"states must have 2 columns (x, y), got {X.shape[1]}")
    return X
