"""Input validation for the estimator API.

Accepts both the native (n, 17, 2)/(n, 17, 3) joint layouts and the flat
(n, 34)/(n, 51) design-matrix layouts common in tabular pipelines; always
returns the native layout as float64.
"""
from __future__ import annotations

import numpy as np

from . import skeleton

N = skeleton.N_JOINTS


def _as_joints(name, arr, width, n_samples=None):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2 and a.shape[1] == N * width:
        a = a.reshape(len(a), N, width)
    if a.ndim != 3 or a.shape[1:] != (N, width):
        raise ValueError(
            f"{name} must be (n, {N}, {width}) or (n, {N * width}), got {a.shape}")
    if n_samples is not None and len(a) != n_samples:
        raise ValueError(f"{name} has {len(a)} samples, expected {n_samples}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_joints2d(X, n_samples=None):
    return _as_joints("X", X, 2, n_samples)


def check_joints3d(y, n_samples=None):
    return _as_joints("y", y, 3, n_samples)


def check_mesh_targets(name, arr, n_samples, n_vertices):
    a = np.asarray(arr, dtype=np.float64)
    if a.shape != (n_samples, n_vertices, 3):
        raise ValueError(
            f"{name} must be ({n_samples}, {n_vertices}, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_is_fitted(estimator):
    if getattr(estimator, "params_", None) is None:
        raise RuntimeError(
            f"this {type(estimator).__name__} instance is not fitted yet; "
            "call fit before predict or score")
