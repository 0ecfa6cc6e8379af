"""Synthetic multi-modal phantoms with exact lesion ground truth.

Healthy volumes are an elliptical foreground with smooth per-channel
texture on an exact-zero background. Anomalous volumes add ellipsoidal
lesions with a raised-cosine intensity profile (smooth edges, so they are
not trivially detectable by gradient magnitude) whose per-channel offsets
differ in sign, mimicking multi-modal contrast. Ground truth is the lesion
support at half maximum. Everything is a pure function of (configs, seed).
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .container import write_tensor
from .errors import PlacementError, ValidationError
from .rng import keyed_rng

__all__ = [
    "PhantomConfig",
    "AnomalySpec",
    "gen_healthy",
    "inject_anomalies",
    "gen_dataset",
    "load_manifest",
]


@dataclass(frozen=True)
class PhantomConfig:
    H: int = 64
    W: int = 64
    D: int = 16
    C: int = 2
    mask_fill: tuple = (0.82, 0.82, 0.85)  # ellipse semi-axes as dim fractions
    texture_sigmas: tuple = (5.0, 7.0)  # per-channel blur length scale
    intensity_ranges: tuple = ((0.3, 0.9), (0.25, 0.8))
    seed: int = 0

    def __post_init__(self):
        if min(self.H, self.W, self.D, self.C) < 1:
            raise ValidationError("phantom dimensions must all be >= 1")
        if len(self.texture_sigmas) != self.C or len(self.intensity_ranges) != self.C:
            raise ValidationError(
                "texture_sigmas and intensity_ranges need one entry per channel"
            )
        for lo, hi in self.intensity_ranges:
            if not 0.0 <= lo < hi <= 1.0:
                raise ValidationError(
                    f"intensity ranges must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"
                )
        if any(not 0.0 < f <= 1.0 for f in self.mask_fill):
            raise ValidationError("mask_fill fractions must be in (0, 1]")


@dataclass(frozen=True)
class AnomalySpec:
    count: int = 3
    r_min: float = 2.0
    r_max: float = 12.0
    offsets: tuple = (0.35, -0.3)  # per-channel lesion intensity shifts
    z_scale: float = None  # lesion depth semi-axis = radius * z_scale (None: D/H)
    max_tries: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ValidationError("lesion count must be >= 0")
        if not 1.0 <= self.r_min <= self.r_max:
            raise ValidationError(
                f"need 1 <= r_min <= r_max, got [{self.r_min}, {self.r_max}]"
            )


def _blur1d(a: np.ndarray, sigma: float, axis: int) -> np.ndarray:
    if sigma <= 0:
        return a
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    moved = np.moveaxis(a, axis, -1)
    if moved.shape[-1] == 1:
        return a
    pad = [(0, 0)] * (moved.ndim - 1) + [(radius, radius)]
    padded = np.pad(moved, pad, mode="reflect")
    out = sliding_window_view(padded, 2 * radius + 1, axis=-1) @ kernel
    return np.moveaxis(out, -1, axis)


def _smooth_field(shape, sigma, rng) -> np.ndarray:
    field3 = rng.standard_normal(shape)
    for axis in range(3):
        field3 = _blur1d(field3, sigma, axis)
    return field3


def _ellipsoid_mask(cfg: PhantomConfig) -> np.ndarray:
    center = ((cfg.H - 1) / 2.0, (cfg.W - 1) / 2.0, (cfg.D - 1) / 2.0)
    semi = (
        cfg.mask_fill[0] * cfg.H / 2.0,
        cfg.mask_fill[1] * cfg.W / 2.0,
        cfg.mask_fill[2] * cfg.D / 2.0,
    )
    ii, jj, kk = np.meshgrid(
        np.arange(cfg.H), np.arange(cfg.W), np.arange(cfg.D), indexing="ij"
    )
    rho2 = (
        ((ii - center[0]) / semi[0]) ** 2
        + ((jj - center[1]) / semi[1]) ** 2
        + ((kk - center[2]) / semi[2]) ** 2
    )
    return (rho2 <= 1.0).astype(np.uint8)


def _gen_healthy_rng(cfg: PhantomConfig, rng: np.random.Generator):
    mask = _ellipsoid_mask(cfg)
    vol = np.zeros((cfg.H, cfg.W, cfg.D, cfg.C), dtype=np.float32)
    for c in range(cfg.C):
        f = _smooth_field((cfg.H, cfg.W, cfg.D), cfg.texture_sigmas[c], rng)
        lo, hi = cfg.intensity_ranges[c]
        span = f.max() - f.min()
        if span == 0.0:
            scaled = np.full(f.shape, (lo + hi) / 2.0)
        else:
            scaled = lo + (hi - lo) * (f - f.min()) / span
        vol[..., c] = (scaled * mask).astype(np.float32)
    return vol, mask


def gen_healthy(cfg: PhantomConfig):
    """Healthy (H, W, D, C) phantom and its foreground mask, seeded by cfg."""
    return _gen_healthy_rng(cfg, keyed_rng(cfg.seed, "phantom"))


def _lesion_profile_box(shape, center, semi):
    """Raised-cosine profile over the lesion bounding box.

    Returns (slices, profile) where profile is 0 outside the unit ellipsoid
    and 0.5*(1 + cos(pi * rho)) inside.
    """
    los, his = [], []
    for dim, c, a in zip(shape, center, semi):
        los.append(max(0, int(math.floor(c - a))))
        his.append(min(dim, int(math.ceil(c + a)) + 1))
    box = tuple(slice(lo, hi) for lo, hi in zip(los, his))
    axes = [np.arange(lo, hi, dtype=np.float64) for lo, hi in zip(los, his)]
    ii, jj, kk = np.meshgrid(*axes, indexing="ij")
    rho = np.sqrt(
        ((ii - center[0]) / semi[0]) ** 2
        + ((jj - center[1]) / semi[1]) ** 2
        + ((kk - center[2]) / semi[2]) ** 2
    )
    profile = np.where(rho <= 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(rho, 1.0))), 0.0)
    return box, profile


def _support_fits(brain, box, profile, shape, center, semi):
    # reject lesions whose support would poke outside the grid or the mask
    for dim, c, a in zip(shape, center, semi):
        if c - a < -0.5 or c + a > dim - 0.5:
            return False
    support = profile > 0.0
    return bool(np.all(brain[box][support] > 0))


def _inject_rng(vol, brain, spec: AnomalySpec, rng: np.random.Generator):
    H, W, D, C = vol.shape
    if len(spec.offsets) != C:
        raise ValidationError(
            f"spec has {len(spec.offsets)} channel offsets for a {C}-channel volume"
        )
    z_scale = spec.z_scale if spec.z_scale is not None else D / H
    out = vol.copy()
    gt = np.zeros((H, W, D), dtype=np.uint8)
    fg = np.argwhere(brain > 0)
    if fg.size == 0:
        raise ValidationError("brain mask is empty")
    lesions = []
    for _ in range(spec.count):
        placed = False
        for _attempt in range(spec.max_tries):
            radius = float(rng.uniform(spec.r_min, spec.r_max))
            semi = (radius, radius, max(1.0, radius * z_scale))
            center = tuple(float(v) for v in fg[rng.integers(len(fg))])
            box, profile = _lesion_profile_box((H, W, D), center, semi)
            if _support_fits(brain, box, profile, (H, W, D), center, semi):
                placed = True
                break
        if not placed:
            raise PlacementError(
                f"could not place a lesion inside the mask after {spec.max_tries} tries"
            )
        for c in range(C):
            out[..., c][box] += np.float32(spec.offsets[c]) * profile.astype(np.float32)
        gt[box] |= (profile >= 0.5).astype(np.uint8)
        lesions.append(
            {"center": list(center), "radius": radius, "semi_axes": list(semi)}
        )
    return out, gt, lesions


def inject_anomalies(vol: np.ndarray, brain: np.ndarray, spec: AnomalySpec):
    """Add seeded lesions to a volume; returns (volume, gt mask, lesion metadata)."""
    return _inject_rng(vol, brain, spec, keyed_rng(spec.seed, "lesions"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _check_scale_coverage(radii_per_volume, spec: AnomalySpec) -> None:
    """Seeded multi-scale guarantee: every 20-volume block must contain at
    least one small (<= 3) and one large (>= 10) lesion when the configured
    radius range makes that expectation meaningful."""
    if not (spec.r_min <= 3.0 and spec.r_max >= 10.0 and spec.count > 0):
        return
    n = len(radii_per_volume)
    for start in range(0, n - n % 20, 20):
        block = [r for radii in radii_per_volume[start : start + 20] for r in radii]
        if not any(r <= 3.0 for r in block) or not any(r >= 10.0 for r in block):
            raise PlacementError(
                f"test volumes {start}..{start + 19} lack multi-scale lesion "
                f"coverage (radii <= 3 and >= 10); change the seed"
            )


def gen_dataset(
    out_dir,
    n_train_slices: int,
    n_test: int,
    cfg: PhantomConfig,
    spec: AnomalySpec,
    seed: int = 0,
) -> dict:
    """Write a dataset directory and return its manifest.

    Layout: ``manifest.json`` plus one tensor container per volume under
    ``train/`` (healthy, i.e. anomaly-free) and per volume/mask pair under
    ``test/``. Paths in the manifest are relative, and per-file checksums
    are recorded, so two runs with the same seed produce identical trees.
    """
    if n_train_slices < 1 or n_test < 1:
        raise ValidationError("n_train_slices and n_test must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "train").mkdir(parents=True, exist_ok=True)
    (out_dir / "test").mkdir(parents=True, exist_ok=True)

    n_train_vols = math.ceil(n_train_slices / cfg.D)
    train_entries = []
    for v in range(n_train_vols):
        vol, _ = _gen_healthy_rng(cfg, keyed_rng(seed, "train-vol", v))
        rel = f"train/vol_{v:04d}.ntf"
        write_tensor(out_dir / rel, f"train_vol_{v:04d}", vol)
        train_entries.append({"path": rel, "sha256": _sha256(out_dir / rel)})

    test_entries = []
    radii_per_volume = []
    for v in range(n_test):
        healthy, brain = _gen_healthy_rng(cfg, keyed_rng(seed, "test-vol", v))
        vol, gt, lesions = _inject_rng(
            healthy, brain, spec, keyed_rng(seed, "test-lesions", v)
        )
        radii_per_volume.append([l["radius"] for l in lesions])
        rel_v = f"test/vol_{v:04d}.ntf"
        rel_g = f"test/gt_{v:04d}.ntf"
        write_tensor(out_dir / rel_v, f"test_vol_{v:04d}", vol)
        write_tensor(out_dir / rel_g, f"test_gt_{v:04d}", gt)
        test_entries.append(
            {
                "volume": rel_v,
                "gt": rel_g,
                "sha256_volume": _sha256(out_dir / rel_v),
                "sha256_gt": _sha256(out_dir / rel_g),
                "lesions": lesions,
            }
        )
    _check_scale_coverage(radii_per_volume, spec)

    manifest = {
        "schema_version": 1,
        "seed": int(seed),
        "phantom": asdict(cfg),
        "anomalies": asdict(spec),
        "n_train_slices": int(n_train_slices),
        "train_volumes": train_entries,
        "test_cases": test_entries,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise ValidationError(f"no manifest.json under {data_dir}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid manifest: {exc}") from exc
    if manifest.get("schema_version") != 1:
        raise ValidationError(f"{path}: unsupported schema_version")
    return manifest
