"""Phantom generation, lesion injection, and dataset serialization."""

import json

import numpy as np
import pytest

from andi.errors import PlacementError, ValidationError
from andi.synthgen import (
    AnomalySpec,
    PhantomConfig,
    gen_dataset,
    gen_healthy,
    inject_anomalies,
    load_manifest,
)

SMALL = PhantomConfig(
    H=32, W=32, D=8, C=2,
    texture_sigmas=(3.0, 4.0),
    intensity_ranges=((0.3, 0.9), (0.25, 0.8)),
    seed=1,
)


class TestGenHealthy:
    def test_background_exactly_zero(self):
        vol, mask = gen_healthy(SMALL)
        outside = mask == 0
        for c in range(vol.shape[3]):
            assert np.all(vol[..., c][outside] == 0.0)

    def test_foreground_in_configured_range(self):
        vol, mask = gen_healthy(SMALL)
        inside = mask > 0
        for c, (lo, hi) in enumerate(SMALL.intensity_ranges):
            values = vol[..., c][inside]
            assert values.min() >= 0.0 and values.max() <= hi + 1e-6

    def test_same_seed_bit_identical(self):
        a, _ = gen_healthy(SMALL)
        b, _ = gen_healthy(SMALL)
        assert np.array_equal(a, b)

    def test_smoothness_raises_autocorrelation(self):
        def lag4_autocorr(sigma, seed):
            cfg = PhantomConfig(
                H=32, W=32, D=4, C=1,
                texture_sigmas=(sigma,),
                intensity_ranges=((0.2, 0.8),),
                seed=seed,
            )
            acs = []
            for k in range(50):
                vol, mask = gen_healthy(
                    PhantomConfig(**{**cfg.__dict__, "seed": seed + k})
                )
                f = vol[..., 0][mask > 0].astype(np.float64)
                plane = vol[:, :, 2, 0]
                row = plane[16]
                row = row - row.mean()
                acs.append(abs(np.mean(row[:-4] * row[4:]) / max(row.var(), 1e-12)))
            return float(np.mean(acs))

        assert lag4_autocorr(5.0, 100) > lag4_autocorr(1.0, 100)

    def test_bad_config_rejected(self):
        with pytest.raises(ValidationError):
            PhantomConfig(C=2, texture_sigmas=(3.0,), intensity_ranges=((0.1, 0.5),))
        with pytest.raises(ValidationError):
            PhantomConfig(intensity_ranges=((0.5, 0.4), (0.1, 0.2)))


class TestInjectAnomalies:
    def test_zero_count_is_identity(self):
        vol, mask = gen_healthy(SMALL)
        spec = AnomalySpec(count=0, offsets=(0.3, -0.3), seed=2)
        out, gt, lesions = inject_anomalies(vol, mask, spec)
        assert np.array_equal(out, vol)
        assert gt.sum() == 0
        assert lesions == []

    def test_gt_matches_profile_oracle_for_fixed_radius(self):
        vol, mask = gen_healthy(SMALL)
        spec = AnomalySpec(count=1, r_min=3.0, r_max=3.0, offsets=(0.4, -0.3), seed=3)
        out, gt, lesions = inject_anomalies(vol, mask, spec)
        (lesion,) = lesions
        center = lesion["center"]
        semi = lesion["semi_axes"]
        count = 0
        for i in range(SMALL.H):
            for j in range(SMALL.W):
                for k in range(SMALL.D):
                    rho = np.sqrt(
                        ((i - center[0]) / semi[0]) ** 2
                        + ((j - center[1]) / semi[1]) ** 2
                        + ((k - center[2]) / semi[2]) ** 2
                    )
                    profile = 0.5 * (1 + np.cos(np.pi * rho)) if rho <= 1.0 else 0.0
                    count += profile >= 0.5
        assert int(gt.sum()) == count

    def test_gt_inside_brain_mask(self):
        vol, mask = gen_healthy(SMALL)
        for seed in range(5):
            spec = AnomalySpec(count=3, r_min=2.0, r_max=6.0, offsets=(0.4, -0.3), seed=seed)
            _, gt, _ = inject_anomalies(vol, mask, spec)
            assert np.all(mask[gt > 0] == 1)

    def test_channels_shift_in_opposite_directions(self):
        vol, mask = gen_healthy(SMALL)
        spec = AnomalySpec(count=1, r_min=4.0, r_max=4.0, offsets=(0.4, -0.3), seed=4)
        out, gt, _ = inject_anomalies(vol, mask, spec)
        core = gt > 0
        assert np.mean(out[..., 0][core] - vol[..., 0][core]) > 0
        assert np.mean(out[..., 1][core] - vol[..., 1][core]) < 0

    def test_wrong_offset_count_rejected(self):
        vol, mask = gen_healthy(SMALL)
        with pytest.raises(ValidationError):
            inject_anomalies(vol, mask, AnomalySpec(offsets=(0.4,), seed=0))

    def test_impossible_placement_raises(self):
        vol, mask = gen_healthy(SMALL)
        spec = AnomalySpec(
            count=1, r_min=40.0, r_max=40.0, offsets=(0.4, -0.3), max_tries=50, seed=5
        )
        with pytest.raises(PlacementError):
            inject_anomalies(vol, mask, spec)


SMALL_SET = dict(
    n_train_slices=8,
    n_test=2,
    cfg=SMALL,
    spec=AnomalySpec(count=2, r_min=2.0, r_max=5.0, offsets=(0.35, -0.3)),
    seed=11,
)


class TestGenDataset:
    def test_layout_and_manifest_round_trip(self, tmp_path):
        manifest = gen_dataset(tmp_path / "ds", **SMALL_SET)
        loaded = load_manifest(tmp_path / "ds")
        assert loaded == json.loads(json.dumps(manifest))
        assert (tmp_path / "ds" / "manifest.json").is_file()
        for entry in manifest["train_volumes"]:
            assert (tmp_path / "ds" / entry["path"]).is_file()
        for case in manifest["test_cases"]:
            assert (tmp_path / "ds" / case["volume"]).is_file()
            assert (tmp_path / "ds" / case["gt"]).is_file()

    def test_rerun_gives_identical_checksums(self, tmp_path):
        m1 = gen_dataset(tmp_path / "a", **SMALL_SET)
        m2 = gen_dataset(tmp_path / "b", **SMALL_SET)
        assert m1 == m2  # includes all sha256 fields

    def test_pinned_checksum_regression(self, tmp_path):
        # frozen on first generation; guards cross-platform determinism
        manifest = gen_dataset(tmp_path / "ds", **SMALL_SET)
        assert (
            manifest["train_volumes"][0]["sha256"]
            == PINNED_FIRST_TRAIN_SHA
        )

    def test_multiscale_coverage_enforced(self, tmp_path):
        # radius range spanning [2, 12] over >= 20 test volumes must include
        # small and large lesions; the pinned seed satisfies it
        cfg = PhantomConfig(
            H=48, W=48, D=8, C=2,
            texture_sigmas=(3.0, 4.0),
            intensity_ranges=((0.3, 0.9), (0.25, 0.8)),
        )
        spec = AnomalySpec(count=3, r_min=2.0, r_max=12.0, offsets=(0.35, -0.3))
        manifest = gen_dataset(tmp_path / "big", 8, 20, cfg, spec, seed=0)
        radii = [
            lesion["radius"]
            for case in manifest["test_cases"]
            for lesion in case["lesions"]
        ]
        assert any(r <= 3.0 for r in radii)
        assert any(r >= 10.0 for r in radii)

    def test_bad_counts_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            gen_dataset(tmp_path / "x", 0, 1, SMALL, AnomalySpec(offsets=(0.3, -0.3)))


PINNED_FIRST_TRAIN_SHA = (
    "bb27f2e8a935e46878bc3c790e7db00ee446e21fdd09461a5b6966063e1fae18"
)
