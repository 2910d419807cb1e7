"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, name: str = "X") -> np.ndarray:
    """Coerce to a float32 image batch (n, H, W, C) in [0, 1].

    Accepts (n, H, W, C) or (n, H, W); a trailing channel axis is added for
    the latter. Values must be finite and inside [0, 1].
    """
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(
            f"{name} must be an image batch (n, H, W, C) or (n, H, W), got shape {arr.shape}"
        )
    if arr.shape[0] < 1:
        raise ValueError(f"{name} is empty")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got range [{lo:g}, {hi:g}]")
    return arr


def check_same_geometry(X: np.ndarray, image_shape: tuple[int, int, int], name: str = "X") -> np.ndarray:
    if X.shape[1:] != tuple(image_shape):
        raise ValueError(
            f"{name} has per-image shape {X.shape[1:]}, the fitted model expects {tuple(image_shape)}"
        )
    return X


def check_scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.shape}) and labels ({y.shape}) differ in length")
    return s, y
