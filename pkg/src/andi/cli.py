"""Command-line entry points: gen-data, train, detect, eval, sweep, bench.

Every command is driven by one experiment config (a preset or a JSON file);
detection-time flags override the matching config fields. Exit codes:
0 success, 2 validation/configuration error, 3 runtime or correctness
failure.
"""

import argparse
import dataclasses
import json
import os
import sys
import traceback
from pathlib import Path

from . import pipeline
from .config import PRESETS, load_config
from .container import read_tensor, write_tensor
from .errors import AndiError, ValidationError
from .synthgen import gen_dataset

__all__ = ["main"]


def _parse_int_list(text: str):
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError as exc:
        raise ValidationError(f"expected a comma-separated integer list: {text!r}") from exc


def _base_config(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[args.preset]()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _apply_overrides(cfg, args):
    """Fold detection-time flags into the config (None means keep)."""
    anomaly = cfg.anomaly
    for key in ("t_low", "t_high", "agg", "eval_noise"):
        value = getattr(args, key, None)
        if value is not None:
            anomaly = dataclasses.replace(anomaly, **{key: value})
    postproc = cfg.postproc
    if getattr(args, "mf", None) is not None:
        postproc = dataclasses.replace(postproc, median_filter=args.mf)
    if getattr(args, "dilate_radius", None) is not None:
        postproc = dataclasses.replace(postproc, dilate_radius=args.dilate_radius)
    if getattr(args, "yen_bins", None) is not None:
        postproc = dataclasses.replace(postproc, yen_bins=args.yen_bins)
    cfg = dataclasses.replace(cfg, anomaly=anomaly, postproc=postproc)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    threads = getattr(args, "threads", None)
    if threads is None and os.environ.get("ANDI_THREADS"):
        threads = int(os.environ["ANDI_THREADS"])
    if threads is not None:
        cfg = dataclasses.replace(cfg, threads=threads)
    return cfg


def _add_config_args(p):
    p.add_argument("--config", help="experiment config JSON file")
    p.add_argument(
        "--preset", choices=sorted(PRESETS), default="desk", help="named preset"
    )
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument(
        "--print-config", action="store_true", help="dump the config and exit"
    )


def _add_detect_flags(p):
    p.add_argument("--t-low", dest="t_low", type=int)
    p.add_argument("--t-high", dest="t_high", type=int)
    p.add_argument("--agg", choices=["am", "gm"])
    p.add_argument("--eval-noise", dest="eval_noise", choices=["gaussian", "pyramidal"])
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="defaults to ANDI_THREADS or config")
    p.add_argument("--mf", type=int, help="median filter size (0, 3, or 5)")
    p.add_argument("--dilate-radius", dest="dilate_radius", type=int)
    p.add_argument("--yen-bins", dest="yen_bins", type=int)


def cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    if args.print_config:
        print(cfg.to_json(), end="")
        return 0
    manifest = gen_dataset(
        args.out,
        cfg.data.n_train_slices,
        cfg.data.n_test,
        cfg.phantom,
        cfg.lesions,
        seed=cfg.seed,
    )
    print(
        f"wrote {len(manifest['train_volumes'])} training volumes and "
        f"{len(manifest['test_cases'])} test cases to {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _base_config(args)
    if args.print_config:
        print(cfg.to_json(), end="")
        return 0
    result = pipeline.run_training(
        cfg,
        args.data,
        args.out,
        resume=args.resume,
        stop_epoch=args.stop_epoch,
        log_path=args.log,
    )
    print(f"config fingerprint: {cfg.fingerprint()}")
    print(
        f"trained {cfg.train.epochs} epochs; "
        f"first-epoch loss {result.epoch_losses[0]:.6f}, "
        f"final-epoch loss {result.epoch_losses[-1]:.6f}"
    )
    print(f"checkpoint written to {args.out}")
    return 0


def _load_model(args):
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    cfg = _apply_overrides(ckpt.config, args)
    return ckpt, cfg, cfg.schedule.build()


def cmd_detect(args) -> int:
    ckpt, cfg, schedule = _load_model(args)
    vol = read_tensor(args.volume)
    out = pipeline.detect(ckpt.params, schedule, vol, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(out_dir / "channels.ntf", "anomaly_channels", out.result.per_channel)
    write_tensor(out_dir / "anomaly.ntf", "anomaly_map", out.filtered)
    write_tensor(out_dir / "mask.ntf", "mask", out.mask)
    pipeline.write_heatmaps(out_dir / "heatmaps", out.filtered)
    info = {
        "fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "yen_threshold": out.threshold,
        "mask_voxels": int(out.mask.sum()),
        "mask_fraction": float(out.mask.mean()),
    }
    (out_dir / "detect.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    if out.threshold is None:
        print("yen threshold: none (degenerate map, empty mask)")
    else:
        print(f"yen threshold: {out.threshold:.6f}")
    print(f"mask voxels: {info['mask_voxels']} ({info['mask_fraction']:.4%})")
    return 0


def cmd_eval(args) -> int:
    ckpt, cfg, schedule = _load_model(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = pipeline.evaluate(
        ckpt.params,
        schedule,
        args.data,
        cfg,
        oracle_scores=args.oracle_scores,
        scores_path=None if args.from_scores else out_dir / "scores.ntf",
        from_scores=args.from_scores,
    )
    (out_dir / "report.txt").write_text(pipeline.report_to_text(report))
    (out_dir / "report.json").write_text(pipeline.report_to_json(report))
    (out_dir / "pr_curve.csv").write_text(pipeline.pr_curve_csv(report))
    print(
        f"auprc={report.auprc:.4f} ceil_dice={report.ceil_dice:.4f} "
        f"dice_yen={report.dice_yen:.4f}"
    )
    return 0


def cmd_sweep(args) -> int:
    ckpt, cfg, schedule = _load_model(args)
    rows = pipeline.sweep(
        ckpt.params,
        schedule,
        args.data,
        cfg,
        _parse_int_list(args.t_low_list),
        _parse_int_list(args.t_high_list),
    )
    text = pipeline.sweep_csv(rows)
    Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    ckpt, cfg, schedule = _load_model(args)
    vol = read_tensor(args.volume)
    rows = pipeline.bench(
        ckpt.params,
        schedule,
        vol,
        cfg,
        _parse_int_list(args.bench_threads),
        runs=args.runs,
    )
    lines = ["threads,mean_s,std_s,runs"]
    lines += [
        f"{r['threads']},{r['mean_s']:.6f},{r['std_s']:.6f},{r['runs']}" for r in rows
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="andi",
        description=(
            "Train a normative diffusion model on healthy slices and segment "
            "anomalies by aggregating denoising deviations."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser on healthy slices")
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument(
        "--stop-epoch",
        dest="stop_epoch",
        type=int,
        help="interrupt after this many epochs (resume later with --resume)",
    )
    p.add_argument("--log", help="write per-step training log to this file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="anomaly maps and mask for one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help="tensor container with the volume")
    p.add_argument("--out", required=True, help="output directory")
    _add_detect_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="metrics over a dataset with ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--oracle-scores",
        action="store_true",
        help="use ground truth as scores (plumbing check)",
    )
    p.add_argument("--from-scores", help="recompute metrics from saved scores")
    _add_detect_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="AUPRC over a grid of time ranges")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--t-low", dest="t_low_list", required=True, help="comma list")
    p.add_argument("--t-high", dest="t_high_list", required=True, help="comma list")
    p.add_argument("--agg", choices=["am", "gm"])
    p.add_argument("--eval-noise", dest="eval_noise", choices=["gaussian", "pyramidal"])
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--mf", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="wallclock per thread count for one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--threads", dest="bench_threads", required=True, help="comma list")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out", help="optional CSV path")
    p.add_argument("--t-low", dest="t_low", type=int)
    p.add_argument("--t-high", dest="t_high", type=int)
    p.add_argument("--agg", choices=["am", "gm"])
    p.add_argument("--eval-noise", dest="eval_noise", choices=["gaussian", "pyramidal"])
    p.add_argument("--seed", type=int)
    p.add_argument("--mf", type=int)
    p.add_argument("--dilate-radius", dest="dilate_radius", type=int)
    p.add_argument("--yen-bins", dest="yen_bins", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.print_config:
        if not args.data or not args.out:
            parser.error("train requires --data and --out (or --print-config)")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AndiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
