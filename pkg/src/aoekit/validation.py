"""Input validation helpers used by the estimators and metric functions."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

N_JOINTS = 21


def check_points(X, name="X", min_points=1):
    """Return ``X`` as a finite float array of shape (N, 3)."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_points, input_name=name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got {X.shape[1]}")
    return X


def check_joints(X, name="joints", n_joints=N_JOINTS):
    """Return ``X`` as a finite float array of shape (frames, n_joints, 3)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape == (n_joints, 3):
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (n_joints, 3):
        raise ValueError(f"{name} must have shape (frames, {n_joints}, 3), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_timestamps(t, name="timestamps"):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} contains non-finite values")
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise ValueError(f"{name} must be strictly increasing")
    return t


def check_series(X, name="X"):
    """Flatten a time series ``(frames, ...)`` into ``(frames, features)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 1:
        raise ValueError(f"{name} must have a leading frame axis")
    shape = X.shape
    X2 = X.reshape(shape[0], -1) if X.ndim != 2 else X
    X2 = check_array(X2, dtype=np.float64, ensure_min_samples=1, input_name=name)
    return X2, shape
