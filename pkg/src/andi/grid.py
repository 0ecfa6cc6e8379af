"""Dense-grid primitives: resampling, percentiles, slicing.

Conventions (fixed so file formats stay bit-exact): float32 values,
channels-last, row-major with W fastest. A slice is ``(H, W, C)``, a
volume ``(H, W, D, C)``; axis 2 of a volume is the axial stack.
"""

import numpy as np

from ._validation import as_slice, as_volume, check_finite
from .errors import NormalizationError, ValidationError

__all__ = [
    "bilinear_upsample",
    "percentile",
    "normalize_by_percentile",
    "slice_axial",
    "stack_axial",
]


def bilinear_upsample(src: np.ndarray, target: tuple) -> np.ndarray:
    """Resample an (h, w, C) grid to (H, W, C) with bilinear interpolation.

    Uses half-pixel-center coordinate mapping (source x = (dst + 0.5)*w/W - 0.5)
    with border clamping; each channel is resampled independently. Upsampling
    only: the target must be at least as large as the source in both axes.
    """
    src = np.asarray(src)
    if src.ndim != 3:
        raise ValidationError(f"source must be (h, w, C), got shape {src.shape}")
    h, w, _ = src.shape
    H, W = int(target[0]), int(target[1])
    if H < h or W < w:
        raise ValidationError(
            f"target {(H, W)} is smaller than source {(h, w)}; upsample only"
        )
    if (h, w) == (H, W):
        return src.copy()

    def axis_coords(n_src, n_dst):
        x = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        x = np.clip(x, 0.0, n_src - 1.0)
        lo = np.floor(x).astype(np.intp)
        lo = np.minimum(lo, n_src - 2) if n_src > 1 else np.zeros_like(lo)
        frac = x - lo
        return lo, frac

    yi, fy = axis_coords(h, H)
    xi, fx = axis_coords(w, W)
    y1 = np.minimum(yi + 1, h - 1)
    x1 = np.minimum(xi + 1, w - 1)

    # lerp form a + f*(b - a): exact on constant grids and at zero fraction
    fy = fy[:, None, None].astype(src.dtype, copy=False)
    fx = fx[None, :, None].astype(src.dtype, copy=False)
    row_lo, row_hi = src[yi], src[y1]
    top = row_lo[:, xi] + fx * (row_lo[:, x1] - row_lo[:, xi])
    bot = row_hi[:, xi] + fx * (row_hi[:, x1] - row_hi[:, xi])
    return top + fy * (bot - top)


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile of a non-empty sequence; p in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValidationError("percentile of an empty sequence")
    check_finite(arr, "percentile input")
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"percentile fraction must be in [0, 1], got {p}")
    return float(np.quantile(arr, p, method="linear"))


def normalize_by_percentile(
    vol: np.ndarray, p: float = 0.99, foreground_threshold: float = 0.0
) -> np.ndarray:
    """Divide each channel by the p-percentile of its foreground voxels.

    Foreground means strictly greater than ``foreground_threshold`` (synthetic
    data uses exact-zero background). Raises ``NormalizationError`` naming the
    channel if it has no foreground or a non-positive percentile.
    """
    vol = as_volume(vol, "volume")
    out = np.empty_like(vol)
    for c in range(vol.shape[3]):
        chan = vol[..., c]
        fg = chan[chan > foreground_threshold]
        if fg.size == 0:
            raise NormalizationError(f"channel {c} has no foreground voxels")
        scale = percentile(fg, p)
        if scale <= 0.0:
            raise NormalizationError(
                f"channel {c} has non-positive {p:.2f}-percentile ({scale})"
            )
        out[..., c] = chan / np.float32(scale)
    return out


def slice_axial(vol: np.ndarray) -> list:
    """Split an (H, W, D, C) volume into D slices of shape (H, W, C)."""
    vol = as_volume(vol, "volume")
    return [np.ascontiguousarray(vol[:, :, k, :]) for k in range(vol.shape[2])]


def stack_axial(slices) -> np.ndarray:
    """Stack (H, W, C) slices back into an (H, W, D, C) volume.

    Exact inverse of ``slice_axial``: stack(slice(v)) == v bit-for-bit.
    """
    slices = list(slices)
    if not slices:
        raise ValidationError("cannot stack an empty slice sequence")
    first = as_slice(slices[0], "slice 0", dtype=None)
    for k, s in enumerate(slices[1:], start=1):
        s = np.asarray(s)
        if s.shape != first.shape:
            raise ValidationError(
                f"slice {k} shape {s.shape} does not match slice 0 {first.shape}"
            )
    return np.stack([np.asarray(s) for s in slices], axis=2)
