"""Input checks shared by the estimators and the functional API."""
from __future__ import annotations

import numpy as np


def check_binary_mask(mask, name="mask", ndim=2) -> np.ndarray:
    """Return ``mask`` as a bool array, rejecting values outside {0, 1}."""
    arr = np.asarray(mask)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return arr.astype(bool)


def check_mask_pair(a, b, names=("pred", "gt")):
    a = check_binary_mask(a, names[0])
    b = check_binary_mask(b, names[1])
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} shape {a.shape} != {names[1]} shape {b.shape}")
    return a, b


def check_points(points, bounds=None) -> np.ndarray:
    """Coerce a sequence of (row, col) pairs to an (n, 2) integer array."""
    arr = np.asarray(points)
    if arr.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"points must have shape (n, 2), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("points must be integer pixel coordinates")
        arr = arr.astype(np.int64)
    if bounds is not None:
        rows, cols = bounds
        if (arr < 0).any() or (arr[:, 0] >= rows).any() or (arr[:, 1] >= cols).any():
            raise ValueError(f"points fall outside bounds {bounds}")
    return arr.astype(np.int64, copy=False)
