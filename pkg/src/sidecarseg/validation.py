"""Input validation for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .data import IGNORE_INDEX
from .errors import DataError, DimensionError
from .model import DOWNSAMPLE_FACTOR


def check_image_batch(X) -> np.ndarray:
    """Coerce to (N, H, W, 3) float32 in [0, 1] with model-compatible dims."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DimensionError(f"expected (N, H, W, 3) images, got shape {arr.shape}")
    h, w = arr.shape[1:3]
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise DimensionError(f"image dims must be divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DataError("image values must lie in [0, 1]")
    return arr


def check_label_batch(y, images: np.ndarray, allowed_ids=None) -> np.ndarray:
    """Coerce labels to (N, H, W) uint8 matching the image batch."""
    arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape != images.shape[:3]:
        raise DimensionError(
            f"labels {arr.shape} do not match images {images.shape[:3]}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DataError(f"labels must be integer ids, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise DataError("label ids must fit in 8 bits")
    if allowed_ids is not None:
        allowed = set(int(c) for c in allowed_ids) | {IGNORE_INDEX}
        present = set(int(v) for v in np.unique(arr))
        extra = sorted(present - allowed)
        if extra:
            raise DataError(f"labels {extra} outside the allowed id set")
    return arr.astype(np.uint8)
