"""Anomaly scores to segmentation masks: filtering, thresholding, morphology.

The detection pipeline applies these in a fixed order: channel max-pooled
map -> 3-D median filter -> Yen threshold -> binarize -> dilate. Yen runs
per subject, so no labeled data is needed to pick an operating point; the
dilation compensates for the systematic undersegmentation of thresholded
anomaly maps.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import as_mask, as_scalar_volume
from .errors import DegenerateInputError, ValidationError

__all__ = [
    "median_filter_3d",
    "yen_bin_index",
    "yen_threshold",
    "dilate_3d",
    "binarize",
]


def median_filter_3d(a: np.ndarray, k: int) -> np.ndarray:
    """Replace each voxel by the median of its k^3 neighborhood.

    Boundaries use reflect padding (edge sample not repeated). k must be odd
    and no larger than the smallest volume dimension.
    """
    a = as_scalar_volume(a, "map")
    if k < 1 or k % 2 == 0:
        raise ValidationError(f"kernel size must be odd and >= 1, got {k}")
    if k > min(a.shape):
        raise ValidationError(
            f"kernel size {k} exceeds smallest dimension of shape {a.shape}"
        )
    if k == 1:
        return a.copy()
    pad = k // 2
    padded = np.pad(a, pad, mode="reflect")
    windows = sliding_window_view(padded, (k, k, k))
    return np.median(windows, axis=(3, 4, 5)).astype(np.float32)


def yen_bin_index(counts: np.ndarray) -> int:
    """Cut position maximizing the maximum-correlation criterion.

    A cut at index j puts bins 0..j in the background class and the rest in
    the foreground. Returns the lowest maximizing j in [0, nbins - 2].
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValidationError("histogram must be 1-d with at least two bins")
    total = counts.sum()
    if total <= 0:
        raise DegenerateInputError("empty histogram")
    p = counts / total
    c1 = np.cumsum(p)[:-1]
    c1sq = np.cumsum(p * p)[:-1]
    p2sq = np.sum(p * p) - np.cumsum(p * p)[:-1]
    valid = (c1 > 0.0) & (c1 < 1.0) & (c1sq > 0.0) & (p2sq > 0.0)
    if not np.any(valid):
        raise DegenerateInputError("histogram mass does not split into two classes")
    with np.errstate(divide="ignore", invalid="ignore"):
        crit = 2.0 * np.log(c1 * (1.0 - c1)) - np.log(c1sq) - np.log(p2sq)
    crit[~valid] = -np.inf
    return int(np.argmax(crit))  # argmax returns the first (lowest) maximizer


def yen_threshold(a: np.ndarray, mask: np.ndarray = None, bins: int = 256) -> float:
    """Per-subject automatic threshold from a 256-bin histogram of the map.

    Considers all voxels, or only those under ``mask`` when given. Raises
    ``DegenerateInputError`` when the considered region has no dynamic range
    (callers typically map that to an empty segmentation).
    """
    a = as_scalar_volume(a, "map")
    if bins < 2:
        raise ValidationError(f"bins must be >= 2, got {bins}")
    values = a[as_mask(mask, "mask") > 0] if mask is not None else a.ravel()
    if values.size == 0:
        raise DegenerateInputError("no voxels to threshold")
    lo = float(values.min())
    hi = float(values.max())
    if not lo < hi:
        raise DegenerateInputError("constant input has no threshold")
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    cut = yen_bin_index(counts)
    return float(edges[cut + 1])


def dilate_3d(s: np.ndarray, radius: int = 1) -> np.ndarray:
    """Binary dilation with a cube structuring element of side 2*radius + 1."""
    s = as_mask(s, "mask")
    if radius < 0:
        raise ValidationError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return s.copy()
    k = 2 * radius + 1
    padded = np.pad(s, radius, mode="constant", constant_values=0)
    windows = sliding_window_view(padded, (k, k, k))
    return windows.max(axis=(3, 4, 5)).astype(np.uint8)


def binarize(a: np.ndarray, thr: float) -> np.ndarray:
    """Strict threshold: 1 where a > thr, else 0."""
    a = as_scalar_volume(a, "map")
    return (a > np.float32(thr)).astype(np.uint8)
