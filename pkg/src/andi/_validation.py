"""Input validation helpers.

Grids are plain numpy arrays with fixed conventions rather than wrapper
classes: slices are float32 ``(H, W, C)``, volumes are float32
``(H, W, D, C)``, scalar volumes are float32 ``(H, W, D)``, and masks are
uint8 ``(H, W, D)`` with values in {0, 1}. Row-major, channels-last. The
helpers below coerce and check those conventions and raise
``ValidationError`` on violation, mirroring how scikit-learn's
``check_array`` is used at estimator boundaries.
"""

import numpy as np

from .errors import ValidationError

__all__ = [
    "as_slice",
    "as_volume",
    "as_scalar_volume",
    "as_mask",
    "check_finite",
    "check_positive_int",
]


def check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or value < 1:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def _as_float_grid(a, ndim: int, name: str, dtype) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-d, got shape {arr.shape}")
    if any(s < 1 for s in arr.shape):
        raise ValidationError(f"{name} has an empty axis: shape {arr.shape}")
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    check_finite(arr, name)
    return arr


def as_slice(a, name: str = "slice", dtype=np.float32) -> np.ndarray:
    """Validate an (H, W, C) grid. Pass ``dtype=None`` to keep the input dtype."""
    return _as_float_grid(a, 3, name, dtype)


def as_volume(a, name: str = "volume", dtype=np.float32) -> np.ndarray:
    """Validate an (H, W, D, C) grid."""
    return _as_float_grid(a, 4, name, dtype)


def as_scalar_volume(a, name: str = "map", dtype=np.float32) -> np.ndarray:
    """Validate an (H, W, D) grid."""
    return _as_float_grid(a, 3, name, dtype)


def as_mask(a, name: str = "mask") -> np.ndarray:
    """Validate a binary (H, W, D) mask and return it as uint8 in {0, 1}."""
    arr = np.asarray(a)
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be 3-d, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    arr = arr.astype(np.uint8, copy=False)
    if arr.size and arr.max(initial=0) > 1:
        raise ValidationError(f"{name} must be binary (values in {{0, 1}})")
    return arr
