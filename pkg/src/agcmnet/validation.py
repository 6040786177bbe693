"""Input checks shared by the estimator and the training entry points."""

from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError


def check_images(X, size=None) -> np.ndarray:
    """Return ``X`` as a float64 array of shape (n, 3, H, W) with finite values in [0, 1]."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected images shaped (n, 3, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError("no images given")
    if size is not None and arr.shape[2:] != tuple(size):
        raise ShapeError(f"images are {arr.shape[2]}x{arr.shape[3]}, model expects {size[0]}x{size[1]}")
    if not np.isfinite(arr).all():
        raise DataError("images contain non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("image values must lie in [0, 1]")
    return arr


def check_masks(y, images: np.ndarray) -> np.ndarray:
    """Return binary masks of shape (n, 1, H, W) matching ``images``."""
    arr = np.asarray(y, dtype=np.float64)
    n, _, h, w = images.shape
    if arr.shape == (n, h, w):
        arr = arr[:, None]
    if arr.shape != (n, 1, h, w):
        raise ShapeError(f"masks {np.shape(y)} do not match images {images.shape}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise DataError("masks must be binary (0 or 1)")
    return arr
