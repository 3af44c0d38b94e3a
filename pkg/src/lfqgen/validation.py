"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np


def check_images(images, size: int | None = None, channels: int | None = None, dtype=np.float64) -> np.ndarray:
    """Return ``images`` as a finite [N, C, H, W] float array in [-1, 1]."""
    arr = np.asarray(images)
    if arr.dtype.kind not in "fiu":
        raise TypeError(f"images must be numeric, got dtype {arr.dtype}")
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"images must be [N, C, H, W], got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("no images given")
    if channels is not None and arr.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[1]}")
    if size is not None and arr.shape[2:] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {arr.shape[2]}x{arr.shape[3]}")
    arr = arr.astype(dtype, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError("images contain NaN or infinity")
    if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [-1, 1]")
    return arr


def check_token_grids(grids, bits: int, grid_size: int | None = None) -> np.ndarray:
    """Return ``grids`` as an int64 [N, H, W] array of indices below 2**bits."""
    arr = np.asarray(grids)
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind == "f" and arr.size and np.array_equal(arr, np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise TypeError(f"token grids must be integers, got dtype {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"token grids must be [N, H, W], got shape {arr.shape}")
    if grid_size is not None and arr.shape[1:] != (grid_size, grid_size):
        raise ValueError(f"expected {grid_size}x{grid_size} grids, got {arr.shape[1]}x{arr.shape[2]}")
    arr = arr.astype(np.int64, copy=False)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << bits)):
        raise ValueError(f"token indices must lie in [0, {1 << bits})")
    return arr


def check_class_ids(y, n: int, num_classes: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim == 0:
        arr = np.full(n, int(arr))
    if arr.shape != (n,):
        raise ValueError(f"expected {n} class ids, got shape {arr.shape}")
    if arr.dtype.kind not in "iu":
        raise TypeError(f"class ids must be integers, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    return arr.astype(np.int64)
