"""End-to-end operations behind the CLI: training, detection, evaluation,
range sweeps, and benchmarking, plus checkpoint and report persistence.

Every function here is a pure function of (config, input files, seed) at the
byte level of its outputs; wallclock tables are the only exception.
"""

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import metrics as me
from ._validation import as_volume
from .anomaly import (
    AnomalyResult,
    aggregate_am,
    aggregate_gm,
    anomaly_volume,
    deviation_stack_slice,
)
from .config import ExperimentConfig, config_from_dict
from .container import read_tensor, read_tensors, write_tensor, write_tensors
from .errors import (
    CorrectnessError,
    DegenerateInputError,
    FormatError,
    ValidationError,
)
from .grid import normalize_by_percentile, slice_axial
from .metrics import EvalReport
from .postproc import binarize, dilate_3d, median_filter_3d, yen_threshold
from .rng import derive_seed, keyed_rng
from .schedule import TimeRange
from .synthgen import load_manifest
from .train import OptimizerState, TrainResult, train

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "load_training_slices",
    "load_test_cases",
    "run_training",
    "DetectionOutput",
    "compute_scores",
    "detect",
    "metrics_from_scores",
    "evaluate",
    "sweep",
    "bench",
    "write_pgm",
]


# ---------------------------------------------------------------------------
# dataset access
# ---------------------------------------------------------------------------


def prepare_volume(vol: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    if cfg.normalize:
        return normalize_by_percentile(vol, cfg.normalize_percentile)
    return vol


def load_training_slices(data_dir, cfg: ExperimentConfig) -> np.ndarray:
    """Healthy training slices: normalized volumes sliced along the stack axis."""
    manifest = load_manifest(data_dir)
    root = Path(data_dir)
    slices = []
    want = int(manifest["n_train_slices"])
    for entry in manifest["train_volumes"]:
        vol = read_tensor(root / entry["path"])
        vol = prepare_volume(vol, cfg)
        slices.extend(slice_axial(vol))
        if len(slices) >= want:
            break
    if len(slices) < want:
        raise ValidationError(
            f"dataset provides {len(slices)} slices, manifest promises {want}"
        )
    return np.stack(slices[:want], axis=0)


def load_test_cases(data_dir, cfg: ExperimentConfig = None):
    """(volume, gt, metadata) triples; volumes normalized when cfg says so."""
    manifest = load_manifest(data_dir)
    root = Path(data_dir)
    cases = []
    for entry in manifest["test_cases"]:
        vol = read_tensor(root / entry["volume"])
        if cfg is not None:
            vol = prepare_volume(vol, cfg)
        gt = read_tensor(root / entry["gt"])
        cases.append((vol, gt, entry))
    if not cases:
        raise ValidationError(f"dataset under {data_dir} has no test cases")
    return cases


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dn.DenoiserParams
    opt_state: OptimizerState
    config: ExperimentConfig
    epoch: int

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def save_checkpoint(path, params, opt_state, config: ExperimentConfig, epoch: int):
    meta = {
        "schema_version": 1,
        "config": config.to_dict(),
        "fingerprint": config.fingerprint(),
        "epoch": int(epoch),
        "opt_step": int(opt_state.step),
        "param_index": [[n, list(s)] for n, s, _ in params.index],
    }
    meta_bytes = np.frombuffer(
        json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"),
        dtype=np.uint8,
    )
    write_tensors(
        path,
        [
            ("meta", meta_bytes),
            ("theta", params.values.astype(np.float32, copy=False)),
            ("adam_m", opt_state.m.astype(np.float32, copy=False)),
            ("adam_v", opt_state.v.astype(np.float32, copy=False)),
        ],
    )


def load_checkpoint(path) -> Checkpoint:
    tensors = read_tensors(path)
    for key in ("meta", "theta", "adam_m", "adam_v"):
        if key not in tensors:
            raise FormatError(f"{path}: checkpoint is missing record {key!r}")
    meta = json.loads(bytes(tensors["meta"]).decode("utf-8"))
    config = config_from_dict(meta["config"])
    blank = dn.init_params(config.model.build(), seed=0)
    stored_index = [[n, list(s)] for n, s, _ in blank.index]
    if stored_index != meta["param_index"]:
        raise FormatError(f"{path}: parameter index does not match its config")
    params = blank.replace_values(tensors["theta"].astype(np.float32))
    opt_state = OptimizerState(
        m=tensors["adam_m"].astype(np.float32),
        v=tensors["adam_v"].astype(np.float32),
        step=int(meta["opt_step"]),
    )
    return Checkpoint(
        params=params, opt_state=opt_state, config=config, epoch=int(meta["epoch"])
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def run_training(
    cfg: ExperimentConfig,
    data_dir,
    out_checkpoint,
    resume=None,
    stop_epoch=None,
    log_path=None,
) -> TrainResult:
    """Train on a dataset directory and write the final checkpoint.

    ``stop_epoch`` simulates an interruption after that many epochs. With
    ``resume``, continues from a saved checkpoint of the same config; the
    continuation is bit-identical to a run that never stopped.
    """
    slices = load_training_slices(data_dir, cfg)
    if slices.shape[3] != cfg.model.in_channels:
        raise ValidationError(
            f"dataset has {slices.shape[3]} channels, config expects "
            f"{cfg.model.in_channels}"
        )
    kwargs = {}
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.fingerprint != cfg.fingerprint():
            raise ValidationError(
                "resume checkpoint was produced by a different configuration"
            )
        kwargs = {
            "params": ckpt.params,
            "opt_state": ckpt.opt_state,
            "start_epoch": ckpt.epoch,
        }
    result = train(
        slices,
        cfg.model.build(),
        cfg.seeded_train(),
        cfg.schedule.build(),
        cfg.pyramid,
        stop_epoch=stop_epoch,
        **kwargs,
    )
    reached = cfg.train.epochs if stop_epoch is None else stop_epoch
    save_checkpoint(out_checkpoint, result.params, result.opt_state, cfg, reached)
    if log_path is not None:
        lines = ["step\tepoch\tlr\tloss"]
        lines += [
            f"{step}\t{epoch}\t{lr:.8e}\t{loss:.8e}"
            for step, epoch, lr, loss in result.log
        ]
        Path(log_path).write_text("\n".join(lines) + "\n")
    return result


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


@dataclass
class DetectionOutput:
    result: AnomalyResult
    filtered: np.ndarray  # pooled map after median filtering
    threshold: float  # None when the map was degenerate (empty mask)
    mask: np.ndarray


def compute_scores(params, s, vol, cfg: ExperimentConfig, volume_key: int = 0):
    """Aggregated anomaly maps for one volume plus the filtered pooled map."""
    result = anomaly_volume(
        params,
        vol,
        cfg.anomaly.time_range(),
        s,
        agg=cfg.anomaly.agg,
        eval_noise=cfg.anomaly.eval_noise,
        seed=derive_seed(cfg.seed, "eval-volume", volume_key),
        pyramid_cfg=cfg.pyramid,
        threads=cfg.threads,
    )
    filtered = result.pooled
    if cfg.postproc.median_filter:
        filtered = median_filter_3d(filtered, cfg.postproc.median_filter)
    return result, filtered


def segment(filtered: np.ndarray, cfg: ExperimentConfig):
    """Yen threshold, binarize, dilate; degenerate maps give an empty mask."""
    try:
        thr = yen_threshold(filtered, bins=cfg.postproc.yen_bins)
    except DegenerateInputError:
        return None, np.zeros(filtered.shape, dtype=np.uint8)
    mask = binarize(filtered, thr)
    if cfg.postproc.dilate_radius:
        mask = dilate_3d(mask, cfg.postproc.dilate_radius)
    return thr, mask


def detect(params, s, vol, cfg: ExperimentConfig, volume_key: int = 0) -> DetectionOutput:
    vol = as_volume(vol, "volume")
    if vol.shape[3] != params.config.in_channels:
        raise ValidationError(
            f"volume has {vol.shape[3]} channels, checkpoint expects "
            f"{params.config.in_channels}"
        )
    result, filtered = compute_scores(params, s, vol, cfg, volume_key)
    thr, mask = segment(filtered, cfg)
    return DetectionOutput(result=result, filtered=filtered, threshold=thr, mask=mask)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def metrics_from_scores(
    filtered_list, gt_list, cfg: ExperimentConfig, settings=None
) -> EvalReport:
    """Dataset metrics from per-subject filtered score volumes.

    Scores are min-max normalized over the whole evaluated set; AUPRC pools
    voxels across subjects, Dice variants average per subject, and the best
    single-threshold sweep includes every per-subject Yen threshold.
    """
    normalized, (lo, hi) = me.normalize_scores(list(filtered_list))
    gts = [np.asarray(g) for g in gt_list]
    labels = np.concatenate([g.ravel() for g in gts])
    scores = np.concatenate([a.ravel() for a in normalized])
    auprc_value = me.auprc(scores, labels)
    curve = me.pr_curve(scores, labels)

    per_subject = []
    yen_thresholds = []
    masks = []
    for i, a in enumerate(normalized):
        try:
            thr = yen_threshold(a, bins=cfg.postproc.yen_bins)
        except DegenerateInputError:
            thr = None
        if thr is None:
            mask = np.zeros(a.shape, dtype=np.uint8)
        else:
            yen_thresholds.append(thr)
            mask = binarize(a, thr)
            if cfg.postproc.dilate_radius:
                mask = dilate_3d(mask, cfg.postproc.dilate_radius)
        masks.append(mask)
        per_subject.append(
            {
                "subject": i,
                "yen_threshold": thr,
                "dice_yen": me.dice(mask, gts[i]),
                "gt_voxels": int(gts[i].sum()),
            }
        )
    dice_yen_value = me.dice_yen(masks, gts)
    ceil_value, ceil_thr = me.ceil_dice(
        normalized, gts, cfg.metrics.n_candidates, extra_thresholds=yen_thresholds
    )
    return EvalReport(
        auprc=auprc_value,
        ceil_dice=ceil_value,
        ceil_threshold=ceil_thr,
        dice_yen=dice_yen_value,
        per_subject=per_subject,
        fingerprint=cfg.fingerprint(),
        settings={"score_min": lo, "score_max": hi, **(settings or {})},
        pr_curve=curve,
    )


def evaluate(
    params,
    s,
    data_dir,
    cfg: ExperimentConfig,
    *,
    oracle_scores: bool = False,
    scores_path=None,
    from_scores=None,
):
    """Evaluate a model over a dataset directory, returning an EvalReport.

    ``from_scores`` recomputes metrics from previously saved score volumes;
    ``oracle_scores`` substitutes the ground truth for the scores (a plumbing
    check: AUPRC and best-threshold Dice must then be 1).
    """
    cases = load_test_cases(data_dir, cfg)
    gts = [gt for _, gt, _ in cases]
    if from_scores is not None:
        saved = read_tensors(from_scores)
        filtered = [saved[f"scores_{i:04d}"] for i in range(len(cases))]
    elif oracle_scores:
        filtered = [gt.astype(np.float32) for gt in gts]
    else:
        filtered = [
            compute_scores(params, s, vol, cfg, volume_key=i)[1]
            for i, (vol, _, _) in enumerate(cases)
        ]
    if scores_path is not None:
        write_tensors(
            Path(scores_path),
            [(f"scores_{i:04d}", a) for i, a in enumerate(filtered)],
        )
    settings = {
        "seed": cfg.seed,
        "agg": cfg.anomaly.agg,
        "eval_noise": cfg.anomaly.eval_noise,
        "t_low": cfg.anomaly.t_low,
        "t_high": cfg.anomaly.t_high,
        "median_filter": cfg.postproc.median_filter,
        "oracle_scores": bool(oracle_scores),
    }
    return metrics_from_scores(filtered, gts, cfg, settings)


# ---------------------------------------------------------------------------
# time-range sweep
# ---------------------------------------------------------------------------


_AGG_FNS = {"am": aggregate_am, "gm": aggregate_gm}


def sweep(
    params,
    s,
    data_dir,
    cfg: ExperimentConfig,
    t_lows,
    t_highs,
    aggs=None,
    return_scores: bool = False,
):
    """AUPRC for each (t_low, t_high) pair, reusing one deviation pass.

    Deviations over the union range are computed once per slice; each grid
    row then folds its own sub-range, which is exactly what evaluating that
    row directly would compute (per-step noise is keyed by (seed, slice, t)).
    ``aggs`` evaluates several aggregators from the same deviations; with
    ``return_scores`` the per-subject filtered score volumes come back too,
    keyed by (t_low, t_high, agg).
    """
    pairs = [(lo, hi) for lo in t_lows for hi in t_highs if lo <= hi]
    if not pairs:
        raise ValidationError("sweep grid is empty (no t_low <= t_high pair)")
    union = TimeRange(min(p[0] for p in pairs), max(p[1] for p in pairs))
    union.check_schedule(s)
    aggs = tuple(aggs) if aggs else (cfg.anomaly.agg,)
    variants = [(lo, hi, agg) for (lo, hi) in pairs for agg in aggs]

    cases = load_test_cases(data_dir, cfg)
    per_variant_scores = {v: [] for v in variants}
    for v_idx, (vol, _, _) in enumerate(cases):
        seed = derive_seed(cfg.seed, "eval-volume", v_idx)
        H, W, D, C = vol.shape
        channel_maps = {v: np.empty((H, W, D, C), np.float32) for v in variants}
        for k in range(D):
            stack = deviation_stack_slice(
                params,
                vol[:, :, k, :],
                union,
                s,
                eval_noise=cfg.anomaly.eval_noise,
                seed=seed,
                slice_index=k,
                pyramid_cfg=cfg.pyramid,
                threads=cfg.threads,
            )
            for lo, hi, agg in variants:
                sub = stack.maps[lo - union.t_low : hi - union.t_low + 1]
                channel_maps[(lo, hi, agg)][:, :, k, :] = _AGG_FNS[agg](sub)
        for variant in variants:
            pooled = channel_maps[variant].max(axis=3)
            if cfg.postproc.median_filter:
                pooled = median_filter_3d(pooled, cfg.postproc.median_filter)
            per_variant_scores[variant].append(pooled)

    gts = [gt for _, gt, _ in cases]
    labels = np.concatenate([g.ravel() for g in gts])
    rows = []
    for lo, hi, agg in variants:
        normalized, _ = me.normalize_scores(per_variant_scores[(lo, hi, agg)])
        scores = np.concatenate([a.ravel() for a in normalized])
        rows.append(
            {"t_low": lo, "t_high": hi, "agg": agg, "auprc": me.auprc(scores, labels)}
        )
    if return_scores:
        return rows, per_variant_scores
    return rows


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def bench(params, s, vol, cfg: ExperimentConfig, thread_counts, runs: int = 10):
    """Wallclock per thread count, refusing to report on any output mismatch.

    Detection artifacts must be byte-identical across all thread counts; the
    benchmark raises ``CorrectnessError`` otherwise.
    """

    def artifacts(threads):
        run_cfg = dataclasses.replace(cfg, threads=threads)
        out = detect(params, s, vol, run_cfg)
        return (
            out.result.per_channel.tobytes(),
            out.filtered.tobytes(),
            out.mask.tobytes(),
        )

    reference = artifacts(thread_counts[0])
    for threads in thread_counts[1:]:
        if artifacts(threads) != reference:
            raise CorrectnessError(
                f"detection outputs differ between {thread_counts[0]} and "
                f"{threads} threads; refusing to report timings"
            )
    rows = []
    for threads in thread_counts:
        run_cfg = dataclasses.replace(cfg, threads=threads)
        samples = []
        for _ in range(runs):
            t0 = time.perf_counter()
            detect(params, s, vol, run_cfg)
            samples.append(time.perf_counter() - t0)
        rows.append(
            {
                "threads": int(threads),
                "mean_s": float(np.mean(samples)),
                "std_s": float(np.std(samples)),
                "runs": runs,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# report and image emission
# ---------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM writer (deterministic bytes, no image library needed)."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValidationError(f"PGM image must be 2-d, got shape {image.shape}")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + image.tobytes())


def write_heatmaps(out_dir, filtered: np.ndarray) -> list:
    """Per-slice grayscale heatmaps scaled by the volume-level maximum."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    top = float(filtered.max())
    paths = []
    for k in range(filtered.shape[2]):
        plane = filtered[:, :, k]
        gray = (
            np.zeros(plane.shape, np.uint8)
            if top <= 0.0
            else np.round(plane / top * 255.0).astype(np.uint8)
        )
        path = out_dir / f"slice_{k:03d}.pgm"
        write_pgm(path, gray)
        paths.append(path)
    return paths


def report_to_text(report: EvalReport) -> str:
    lines = [
        f"auprc\t{report.auprc:.6f}",
        f"ceil_dice\t{report.ceil_dice:.6f}",
        f"ceil_threshold\t{report.ceil_threshold:.6f}",
        f"dice_yen\t{report.dice_yen:.6f}",
        f"fingerprint\t{report.fingerprint}",
    ]
    for key in sorted(report.settings):
        lines.append(f"{key}\t{report.settings[key]}")
    for entry in report.per_subject:
        thr = "-" if entry["yen_threshold"] is None else f"{entry['yen_threshold']:.6f}"
        lines.append(
            f"subject_{entry['subject']:04d}\tyen={thr}\t"
            f"dice_yen={entry['dice_yen']:.6f}\tgt_voxels={entry['gt_voxels']}"
        )
    return "\n".join(lines) + "\n"


def report_to_json(report: EvalReport) -> str:
    payload = {
        "auprc": report.auprc,
        "ceil_dice": report.ceil_dice,
        "ceil_threshold": report.ceil_threshold,
        "dice_yen": report.dice_yen,
        "fingerprint": report.fingerprint,
        "settings": report.settings,
        "per_subject": report.per_subject,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def pr_curve_csv(report: EvalReport) -> str:
    lines = ["threshold,precision,recall"]
    lines += [f"{t:.9g},{p:.9g},{r:.9g}" for t, p, r in report.pr_curve]
    return "\n".join(lines) + "\n"


def sweep_csv(rows) -> str:
    lines = ["t_low,t_high,agg,auprc"]
    lines += [
        f"{r['t_low']},{r['t_high']},{r['agg']},{r['auprc']:.9g}" for r in rows
    ]
    return "\n".join(lines) + "\n"
