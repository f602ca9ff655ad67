"""Input validation shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .geometry import ScanGeometry


def check_images(X, n: int | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite float64 ``(N, n, n)`` stack; a single 2D image becomes ``N = 1``."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_features=1, input_name=name)
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"{name}: expected square images of shape (N, n, n), got {X.shape}")
    if n is not None and X.shape[1] != n:
        raise ValueError(f"{name}: images are {X.shape[1]}x{X.shape[2]}, expected {n}x{n}")
    return X


def check_sinograms(X, geometry: ScanGeometry, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite float64 ``(N, views, detectors)`` stack matching ``geometry``."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    X = check_array(X, allow_nd=True, dtype=np.float64, input_name=name)
    if X.ndim != 3 or X.shape[1:] != geometry.sinogram_shape:
        raise ValueError(f"{name}: expected sinograms of shape (N, {geometry.num_views}, "
                         f"{geometry.num_detectors}), got {X.shape}")
    return X
