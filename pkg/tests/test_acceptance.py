"""Acceptance gate: one test per numbered criterion.

Each test prints an ``ACCEPT-nn PASS/FAIL`` line (run with ``-s`` or ``-v``
to see them live). Criteria 7-9 train and evaluate the pinned desk-scale
experiment; set ``ANDI_ACCEPTANCE_CACHE=/some/dir`` to persist those
artifacts between runs (they are reused only when the configuration
fingerprint matches).
"""

import dataclasses
import itertools
import json
import math
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import andi.pipeline as pipeline
from andi.anomaly import aggregate_am, aggregate_gm, anomaly_map_slice, deviation_stack_slice
from andi.cli import main as cli_main
from andi.config import desk_config
from andi.container import read_tensors, write_tensors
from andi.denoiser import DenoiserConfig, backward, forward, init_params
from andi.grid import bilinear_upsample
from andi.metrics import auprc, dice
from andi.noise import PyramidConfig, pyramid_level_dims, pyramidal_noise
from andi.postproc import binarize, dilate_3d, median_filter_3d, yen_bin_index
from andi.rng import derive_seed, keyed_rng
from andi.schedule import TimeRange, forward_noise, linear_beta_schedule, mu_from_eps, posterior_mean
from andi.synthgen import AnomalySpec, gen_dataset
from andi.train import TrainConfig, loss_and_grad

from conftest import tiny_config
from test_denoiser import TINY as TINY_NET
from test_denoiser import randomized_params
from test_metrics import auprc_oracle
from test_postproc import dilate_oracle, median_oracle, yen_cut_oracle
from test_schedule import bayes_posterior_mean_oracle


@contextmanager
def criterion(number: int, label: str):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPT-{number:02d} FAIL {label} [{time.perf_counter() - start:.1f}s]")
        raise
    print(f"ACCEPT-{number:02d} PASS {label} [{time.perf_counter() - start:.1f}s]")


# ---------------------------------------------------------------------------
# desk-scale fixtures (criteria 7-9), cached by config fingerprint
# ---------------------------------------------------------------------------

DESK = desk_config(seed=0)
TIMINGS = {}
CACHED = set()


def _timed(key, fn):
    t0 = time.perf_counter()
    result = fn()
    TIMINGS[key] = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    env = os.environ.get("ANDI_ACCEPTANCE_CACHE")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("acceptance-cache")


def _fingerprinted(cache_dir, name, fingerprint, build):
    """Build an artifact under the cache unless a matching one exists."""
    stamp = cache_dir / f"{name}.fp"
    target = cache_dir / name
    if stamp.exists() and stamp.read_text() == fingerprint and target.exists():
        CACHED.add(name)
        return target
    build(target)
    stamp.write_text(fingerprint)
    return target


@pytest.fixture(scope="session")
def desk_data(cache_dir):
    def build(target):
        _timed(
            "gen_data",
            lambda: gen_dataset(
                target,
                DESK.data.n_train_slices,
                DESK.data.n_test,
                DESK.phantom,
                DESK.lesions,
                seed=DESK.seed,
            ),
        )

    return _fingerprinted(cache_dir, "desk-data", DESK.fingerprint(), build)


def _train_variant(noise_kind, cache_dir, desk_data):
    cfg = dataclasses.replace(
        DESK, train=dataclasses.replace(DESK.train, training_noise=noise_kind)
    )

    def build(target):
        _timed(
            f"train_{noise_kind}",
            lambda: pipeline.run_training(cfg, desk_data, target),
        )

    path = _fingerprinted(
        cache_dir, f"model-{noise_kind}.ntf", cfg.fingerprint(), build
    )
    return pipeline.load_checkpoint(path), cfg


@pytest.fixture(scope="session")
def pyramidal_model(cache_dir, desk_data):
    return _train_variant("pyramidal", cache_dir, desk_data)


@pytest.fixture(scope="session")
def gaussian_model(cache_dir, desk_data):
    return _train_variant("gaussian", cache_dir, desk_data)


SWEEP_T_HIGHS = (150, 200, 250)


@pytest.fixture(scope="session")
def desk_sweep(cache_dir, desk_data, pyramidal_model):
    """One deviation pass over [75, 250] on the pyramidal model: sweep rows
    for every T_u plus gm and am score volumes for the [75, 200] row."""
    ckpt, cfg = pyramidal_model
    fingerprint = cfg.fingerprint() + ":sweep-v1"
    target_name = "sweep-cache.ntf"

    def build(target):
        def compute():
            schedule = cfg.schedule.build()
            rows, scores = pipeline.sweep(
                ckpt.params,
                schedule,
                desk_data,
                cfg,
                [75],
                list(SWEEP_T_HIGHS),
                aggs=("gm", "am"),
                return_scores=True,
            )
            records = [("rows", np.frombuffer(json.dumps(rows).encode(), np.uint8))]
            for (lo, hi, agg), vols in scores.items():
                for i, vol in enumerate(vols):
                    records.append((f"{lo}_{hi}_{agg}_{i:04d}", vol))
            write_tensors(target, records)

        _timed("sweep", compute)

    path = _fingerprinted(cache_dir, target_name, fingerprint, build)
    tensors = read_tensors(path)
    rows = json.loads(bytes(tensors.pop("rows")).decode())
    scores = {}
    for name, vol in tensors.items():
        lo, hi, agg, idx = name.rsplit("_", 3)
        scores.setdefault((int(lo), int(hi), agg), []).append((int(idx), vol))
    scores = {
        key: [vol for _, vol in sorted(vols)] for key, vols in scores.items()
    }
    return rows, scores


def _cached_eval(cache_dir, data_dir, name, ckpt, cfg):
    fingerprint = cfg.fingerprint() + ":" + name
    scores_name = f"eval-{name}.ntf"

    def build(target):
        schedule = cfg.schedule.build()
        _timed(
            f"eval_{name}",
            lambda: pipeline.evaluate(
                ckpt.params, schedule, data_dir, cfg, scores_path=target
            ),
        )

    path = _fingerprinted(cache_dir, scores_name, fingerprint, build)
    return pipeline.evaluate(None, None, data_dir, cfg, from_scores=path)


@pytest.fixture(scope="session")
def gaussian_eval_report(cache_dir, desk_data, gaussian_model):
    ckpt, cfg = gaussian_model
    return _cached_eval(cache_dir, desk_data, "gauss-model-gm", ckpt, cfg)


@pytest.fixture(scope="session")
def pyramidal_eval_noise_report(cache_dir, desk_data, pyramidal_model):
    ckpt, cfg = pyramidal_model
    cfg = dataclasses.replace(
        cfg, anomaly=dataclasses.replace(cfg.anomaly, eval_noise="pyramidal")
    )
    return _cached_eval(cache_dir, desk_data, "pyr-model-pyr-eval-gm", ckpt, cfg)


@pytest.fixture(scope="session")
def desk_reports(desk_data, desk_sweep, gaussian_eval_report, pyramidal_eval_noise_report):
    """Full EvalReports for every desk-scale configuration we evaluated."""
    _, scores = desk_sweep
    gts = [gt for _, gt, _ in pipeline.load_test_cases(desk_data)]
    reports = {
        "pyr_gauss_gm": pipeline.metrics_from_scores(scores[(75, 200, "gm")], gts, DESK),
        "pyr_gauss_am": pipeline.metrics_from_scores(scores[(75, 200, "am")], gts, DESK),
        "gauss_gauss_gm": gaussian_eval_report,
        "pyr_pyr_gm": pyramidal_eval_noise_report,
    }
    return reports


@pytest.fixture(scope="session")
def small_lesion_reports(cache_dir, pyramidal_model):
    """Small-lesion split (radii 2-4) scored once, filtered at MF 3 and MF 5."""
    ckpt, cfg = pyramidal_model
    small_cfg = dataclasses.replace(
        DESK,
        data=dataclasses.replace(DESK.data, n_train_slices=16, n_test=10),
        lesions=dataclasses.replace(DESK.lesions, r_min=2.0, r_max=4.0),
    )
    data_fp = small_cfg.fingerprint() + ":small-data"

    def build_data(target):
        gen_dataset(
            target, 16, 10, small_cfg.phantom, small_cfg.seeded_lesions(),
            seed=derive_seed(DESK.seed, "small-lesion-split"),
        )

    data_dir = _fingerprinted(cache_dir, "small-data", data_fp, build_data)

    scores_fp = cfg.fingerprint() + ":small-scores-v1"

    def build_scores(target):
        def compute():
            schedule = cfg.schedule.build()
            cases = pipeline.load_test_cases(data_dir, cfg)
            records = []
            for v, (vol, _, _) in enumerate(cases):
                seed = derive_seed(cfg.seed, "eval-volume", v)
                H, W, D, C = vol.shape
                channel = np.empty((H, W, D, C), np.float32)
                for k in range(D):
                    stack = deviation_stack_slice(
                        ckpt.params, vol[:, :, k, :], TimeRange(75, 200), schedule,
                        eval_noise="gaussian", seed=seed, slice_index=k,
                        pyramid_cfg=cfg.pyramid,
                    )
                    channel[:, :, k, :] = aggregate_gm(stack)
                records.append((f"pooled_{v:04d}", channel.max(axis=3)))
            write_tensors(target, records)

        _timed("small_lesion_eval", compute)

    scores_path = _fingerprinted(cache_dir, "small-scores.ntf", scores_fp, build_scores)
    tensors = read_tensors(scores_path)
    pooled = [tensors[f"pooled_{v:04d}"] for v in range(10)]
    gts = [gt for _, gt, _ in pipeline.load_test_cases(data_dir)]
    reports = {}
    for mf in (3, 5):
        filtered = [median_filter_3d(p, mf) for p in pooled]
        reports[mf] = pipeline.metrics_from_scores(
            filtered, gts, DESK, settings={"median_filter": mf}
        )
    return reports


# ---------------------------------------------------------------------------
# criteria 1-6: oracles and contracts
# ---------------------------------------------------------------------------


class TestCriterion1:
    def test_math_kernel_oracles(self):
        with criterion(1, "math-kernel oracles"):
            start = time.perf_counter()
            s = linear_beta_schedule(1000, 1e-4, 0.02)

            # posterior mean against numerical Bayes integration
            for t, x_t, x0 in [(10, 0.3, 0.7), (200, -0.4, 1.1), (2, 0.9, 0.2), (999, 0.1, -0.3)]:
                got = posterior_mean(np.array([[[x_t]]]), np.array([[[x0]]]), t, s)[0, 0, 0]
                want = bayes_posterior_mean_oracle(x_t, x0, t, s)
                assert abs(got - want) <= 1e-8

            # reparameterization identity in float32
            rng = np.random.default_rng(0)
            for _ in range(40):
                t = int(rng.integers(1, 1001))
                x0 = rng.standard_normal((8, 8, 2)).astype(np.float32)
                eps = rng.standard_normal((8, 8, 2)).astype(np.float32)
                x_t = forward_noise(x0, t, eps, s)
                np.testing.assert_allclose(
                    mu_from_eps(x_t, eps, t, s),
                    posterior_mean(x_t, x0, t, s),
                    atol=1e-5,
                )

            # cumulative-product oracle
            prod = 1.0
            for t in range(1, 1001):
                prod *= 1.0 - s.beta[t]
                assert abs(s.alpha_bar[t] - prod) <= 1e-12 * abs(prod)

            assert time.perf_counter() - start < 10.0


class TestCriterion2:
    def test_gradient_correctness(self):
        with criterion(2, "finite-difference gradient checks"):
            start = time.perf_counter()
            s = linear_beta_schedule(1000, 1e-4, 0.02)
            h = 1e-5

            def max_rel_error(analytic, objective, values, rng, n=200):
                floor = 1e-6 * max(1.0, float(np.abs(analytic).max()))
                idx = rng.choice(values.size, size=n, replace=False)
                worst = 0.0
                for i in idx:
                    up = values.copy()
                    up[i] += h
                    down = values.copy()
                    down[i] -= h
                    fd = (objective(up) - objective(down)) / (2 * h)
                    worst = max(
                        worst,
                        abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), floor),
                    )
                return worst

            rng = np.random.default_rng(1)
            params = randomized_params(TINY_NET, seed=21)
            x = rng.standard_normal((8, 8, 1))
            dy = rng.standard_normal((8, 8, 1))
            net_grad = backward(params, x, 90, dy)
            worst_net = max_rel_error(
                net_grad,
                lambda v: float(np.sum(dy * forward(params.replace_values(v), x, 90))),
                params.values,
                rng,
            )
            assert worst_net <= 1e-4

            eps = rng.standard_normal((8, 8, 1))
            _, loss_grad = loss_and_grad(params, x, 120, eps, s)
            worst_loss = max_rel_error(
                loss_grad,
                lambda v: loss_and_grad(params.replace_values(v), x, 120, eps, s)[0],
                params.values,
                rng,
            )
            assert worst_loss <= 1e-4
            assert time.perf_counter() - start < 60.0


class TestCriterion3:
    def test_pyramidal_noise_contracts(self):
        with criterion(3, "pyramidal noise normalization, level dims, determinism"):
            cfg = PyramidConfig()
            for k, shape in enumerate([(64, 64, 2), (128, 128, 1), (31, 57, 3), (512, 512, 2)]):
                sample = pyramidal_noise(shape, cfg, seed=100 + k)
                assert abs(float(np.std(sample.astype(np.float64))) - 1.0) <= 1e-3

            for H in (31, 32, 128):
                for W in (31, 32, 128):
                    for i in range(1, 11):
                        for r in (2, 3, 4):
                            got = pyramid_level_dims(H, W, i, float(r))
                            want = (
                                max(1, -(-H // r ** (i - 1))),
                                max(1, -(-W // r ** (i - 1))),
                            )
                            assert got == want

            a = pyramidal_noise((64, 64, 2), cfg, seed=7)
            b = pyramidal_noise((64, 64, 2), cfg, seed=7)
            assert a.tobytes() == b.tobytes()


class TestCriterion4:
    def test_aggregation_properties(self):
        with criterion(4, "AM-GM inequality and timestep-parallel byte equality"):
            rng = np.random.default_rng(4)
            for _ in range(10_000):
                stack = rng.uniform(0.0, 4.0, (5, 2, 2, 1)).astype(np.float32)
                if rng.uniform() < 0.2:
                    stack[rng.integers(5)] = 0.0
                gm = aggregate_gm(stack).astype(np.float64)
                am = aggregate_am(stack).astype(np.float64)
                assert np.all(gm <= am * (1 + 1e-6) + 1e-12)

            s = linear_beta_schedule(1000, 1e-4, 0.02)
            params = randomized_params(TINY_NET, seed=44)
            params = params.astype(np.float32)
            x0 = rng.standard_normal((32, 32, 1)).astype(np.float32)
            outputs = {
                threads: anomaly_map_slice(
                    params, x0, TimeRange(75, 110), s, agg="gm", seed=9,
                    threads=threads,
                ).tobytes()
                for threads in (1, 2, 4, 8)
            }
            assert len(set(outputs.values())) == 1


class TestCriterion5:
    def test_postproc_oracles(self):
        with criterion(5, "median/dilation/binarize brute force, Yen exhaustive"):
            rng = np.random.default_rng(5)
            for i in range(100):
                vol = rng.uniform(0, 1, (8, 8, 8)).astype(np.float32)
                k = 3 if i % 2 == 0 else 5
                assert np.array_equal(median_filter_3d(vol, k), median_oracle(vol, k))
                mask = (vol > 0.8).astype(np.uint8)
                assert np.array_equal(dilate_3d(mask, 1), dilate_oracle(mask, 1))
                thr = float(rng.uniform(0.2, 0.8))
                want = (vol > np.float32(thr)).astype(np.uint8)
                assert np.array_equal(binarize(vol, thr), want)

            checked = 0
            for i in range(1000):
                counts = rng.integers(0, 40, size=256)
                counts[rng.integers(0, 256)] += int(rng.integers(50, 500))
                oracle = yen_cut_oracle(counts.tolist())
                if oracle is None:
                    continue
                assert yen_bin_index(counts) == oracle
                checked += 1
            assert checked >= 990


class TestCriterion6:
    def test_metric_oracles(self, desk_reports, small_lesion_reports):
        with criterion(6, "AUPRC exhaustive, Dice identities, ceil >= yen"):
            rng = np.random.default_rng(6)
            for n in range(1, 9):
                for bits in itertools.product([0, 1], repeat=n):
                    if not any(bits):
                        continue
                    labels = np.array(bits)
                    for scores in (rng.standard_normal(n), rng.choice([0.1, 0.5, 0.9], n)):
                        assert auprc(scores, labels) == pytest.approx(
                            auprc_oracle(scores, labels), abs=1e-12
                        )

            m = np.zeros((4, 4, 4), np.uint8)
            m[:2] = 1
            assert dice(m, m) == 1.0
            assert dice(m, np.zeros_like(m)) == 0.0
            a = np.zeros(8, np.uint8)
            b = np.zeros(8, np.uint8)
            a[:2] = 1
            b[1:3] = 1
            assert dice(a, b) == 0.5

            evaluated = list(desk_reports.values()) + list(small_lesion_reports.values())
            assert len(evaluated) >= 6
            for report in evaluated:
                assert report.ceil_dice >= report.dice_yen - 1e-12


# ---------------------------------------------------------------------------
# criteria 7-10: desk-scale behavior and end-to-end determinism
# ---------------------------------------------------------------------------


def _budget_minutes() -> float:
    cores = os.cpu_count() or 1
    return 30.0 * max(1.0, 4.0 / cores)


class TestCriterion7:
    def test_training_noise_ablation_direction(self, desk_reports):
        with criterion(7, "pyramidal vs gaussian training-noise ablation"):
            pyr = desk_reports["pyr_gauss_gm"].auprc
            gauss = desk_reports["gauss_gauss_gm"].auprc
            am = desk_reports["pyr_gauss_am"].auprc
            pyr_eval = desk_reports["pyr_pyr_gm"].auprc
            print(
                f"  auprc: pyramidal-trained={pyr:.4f} gaussian-trained={gauss:.4f} "
                f"(gap {pyr - gauss:+.4f}); gm={pyr:.4f} vs am={am:.4f}; "
                f"gauss-eval={pyr:.4f} vs pyramidal-eval={pyr_eval:.4f}"
            )
            assert pyr - gauss >= 0.10
            assert pyr >= am - 0.02  # geometric mean non-inferiority
            assert pyr >= pyr_eval - 0.02  # gaussian-eval non-inferiority

            heavy = [
                "gen_data", "train_pyramidal", "train_gaussian",
                "sweep", "eval_gauss-model-gm", "eval_pyr-model-pyr-eval-gm",
            ]
            if CACHED:
                print(f"  cached artifacts: {sorted(CACHED)}; wallclock budget not re-measured")
            else:
                elapsed_min = sum(TIMINGS.get(k, 0.0) for k in heavy) / 60.0
                budget = _budget_minutes()
                print(f"  desk-scale wallclock: {elapsed_min:.1f} min (budget {budget:.0f} min on {os.cpu_count()} cores)")
                assert elapsed_min <= budget


class TestCriterion8:
    def test_small_lesion_median_filter_effect(self, small_lesion_reports):
        with criterion(8, "small lesions: Dice_Yen MF3 >= MF5"):
            d3 = small_lesion_reports[3].dice_yen
            d5 = small_lesion_reports[5].dice_yen
            print(f"  small-lesion Dice_Yen: MF3={d3:.4f} MF5={d5:.4f}")
            assert d3 >= d5


class TestCriterion9:
    def test_time_range_sensitivity(self, desk_sweep, tmp_path):
        with criterion(9, "AUPRC stability across T_u in {150, 200, 250}"):
            rows, _ = desk_sweep
            gm_rows = [r for r in rows if r["agg"] == "gm"]
            assert {r["t_high"] for r in gm_rows} == set(SWEEP_T_HIGHS)
            values = [r["auprc"] for r in gm_rows]
            print("  sweep: " + ", ".join(
                f"T_u={r['t_high']}: {r['auprc']:.4f}" for r in gm_rows
            ))
            assert max(values) - min(values) < 0.15

            csv_path = tmp_path / "sweep.csv"
            csv_path.write_text(pipeline.sweep_csv(rows))
            lines = csv_path.read_text().strip().splitlines()
            assert lines[0] == "t_low,t_high,agg,auprc"
            assert len(lines) == 1 + len(rows)


class TestCriterion10:
    def test_end_to_end_byte_determinism(self, tmp_path, capsys, monkeypatch):
        with criterion(10, "gen/train/detect/eval reruns byte-identical; bench guard"):
            cfg_path = tmp_path / "cfg.json"
            cfg_path.write_text(tiny_config(seed=3).to_json())

            def pipeline_run(tag):
                root = tmp_path / tag
                data = root / "data"
                ckpt = root / "model.ntf"
                det = root / "det"
                ev = root / "eval"
                assert cli_main(["gen-data", "--config", str(cfg_path), "--out", str(data)]) == 0
                assert cli_main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(ckpt)]) == 0
                manifest = json.loads((data / "manifest.json").read_text())
                vol = data / manifest["test_cases"][0]["volume"]
                assert cli_main(["detect", "--checkpoint", str(ckpt), "--volume", str(vol), "--out", str(det)]) == 0
                assert cli_main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(ev)]) == 0
                artifacts = {}
                for path in sorted(root.rglob("*")):
                    if path.is_file():
                        artifacts[str(path.relative_to(root))] = path.read_bytes()
                return artifacts, ckpt, vol

            first, ckpt, vol = pipeline_run("run1")
            second, _, _ = pipeline_run("run2")
            assert first.keys() == second.keys()
            for name in first:
                assert first[name] == second[name], f"artifact differs: {name}"
            capsys.readouterr()

            # real bench across thread counts must agree and report
            assert cli_main([
                "bench", "--checkpoint", str(ckpt), "--volume", str(vol),
                "--threads", "1,2", "--runs", "1",
            ]) == 0
            out = capsys.readouterr().out
            assert "threads,mean_s,std_s,runs" in out

            # and it must refuse when outputs diverge
            real_detect = pipeline.detect

            def flaky_detect(params, s, v, cfg, volume_key=0):
                result = real_detect(params, s, v, cfg, volume_key)
                if cfg.threads > 1:
                    result.mask = result.mask.copy()
                    result.mask[0, 0, 0] ^= 1
                return result

            monkeypatch.setattr(pipeline, "detect", flaky_detect)
            code = cli_main([
                "bench", "--checkpoint", str(ckpt), "--volume", str(vol),
                "--threads", "1,2", "--runs", "1",
            ])
            assert code == 3
            assert "refusing" in capsys.readouterr().err
