"""Input checks shared by the functional API and the estimator."""
from __future__ import annotations

import numpy as np

from .exceptions import InputError


def check_image(image, channel_axis: int = 0) -> np.ndarray:
    """Return a contiguous float64 ``[3, H, W]`` array with values in [0, 1].

    ``channel_axis=-1`` accepts ``[H, W, 3]`` input; uint8 input is scaled by 1/255.
    """
    arr = getattr(image, "data", image)
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise InputError(f"image must be 3-dimensional, got shape {arr.shape}")
    if channel_axis not in (0, -1, 2):
        raise InputError(f"channel_axis must be 0 or -1, got {channel_axis}")
    if channel_axis != 0:
        arr = np.moveaxis(arr, -1, 0)
    if arr.shape[0] != 3:
        raise InputError(f"image must have 3 channels, got {arr.shape[0]}")
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError("image contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InputError(f"image values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
    return arr


def check_label_map(labels, shape: tuple[int, int] | None = None, max_label: int | None = None,
                    name: str = "label map") -> np.ndarray:
    """Validate a 2-D non-negative integer map; ``max_label`` is an exclusive bound."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise InputError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise InputError(f"{name} is empty")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise InputError(f"{name} must contain integers")
    arr = arr.astype(np.intp)
    if shape is not None and arr.shape != tuple(shape):
        raise InputError(f"{name} dimensions {arr.shape} do not match expected {tuple(shape)}")
    if arr.min() < 0:
        raise InputError(f"{name} contains negative ids")
    if max_label is not None and arr.max() >= max_label:
        bad = np.argwhere(arr >= max_label)[0]
        raise InputError(f"{name} id {arr[tuple(bad)]} at pixel (row={bad[0]}, col={bad[1]}) "
                         f"must be < {max_label}")
    return arr
