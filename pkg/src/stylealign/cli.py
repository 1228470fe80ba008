"""Command-line entry point: ``stylealign <subcommand> ...``.

Exit status is 0 on success and nonzero on failure, with the failing stage
printed in brackets on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io, pipeline, plots
from .alignment import PAPER_T_MODEL, PAPER_T_PRE, AlignmentConfig, calibrate_thresholds
from .conditioning import ProducerConfig, optimal_condition_from_annotation
from .config import OUTPUT_ROOT_ENV, load_config
from .diffusion.model import DiffusionCheckpoint, DiffusionHyper, train_base, train_control
from .errors import ConfigurationError, MeasurementUnavailable
from .evidential.model import TaskCheckpoint, TaskHyper, train_task_model
from .measure import ScanSeries, cimt_from_mask, curvature_proxy_from_series
from .synthdata import SOURCE_STYLE, TARGET_STYLE, SceneSpec, generate_dataset

log = logging.getLogger("stylealign")

EXIT_CONFIG = 2
EXIT_STAGE = 3


def _out(path) -> Path:
    """Relative output paths are placed under the override root when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return path if path.is_absolute() or not root else Path(root) / path


def cmd_synth_data(args) -> int:
    spec = SceneSpec(task=args.task, image_size=args.size, speckle_seed=args.seed)
    style = SOURCE_STYLE if args.style == "source" else TARGET_STYLE
    samples = generate_dataset(spec, style, args.count, args.seed, start=args.start)
    root = io.save_samples(samples, _out(args.out))
    print(f"wrote {len(samples)} {args.style} {args.task} samples to {root}")
    return 0


def cmd_train_diffusion(args) -> int:
    samples = io.load_samples(args.data, "source")
    images = np.stack([s.image for s in samples])
    hyper = DiffusionHyper(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    if args.stage == "base":
        ckpt = train_base(images, hyper, seed=args.seed)
    else:
        if args.base_ckpt is None:
            raise ConfigurationError("--base-ckpt is required for --stage control")
        base = DiffusionCheckpoint.load(args.base_ckpt)
        conds = np.stack([optimal_condition_from_annotation(s).grid for s in samples])
        ckpt = train_control(images, conds, base, hyper, seed=args.seed)
    path = ckpt.save(_out(args.out))
    print(f"{args.stage} checkpoint {path} digest {ckpt.digest()[:12]} final loss {ckpt.training_meta['loss_curve'][-1]:.5f}")
    return 0


def cmd_train_task(args) -> int:
    samples = io.load_samples(args.data, "source")
    ckpt = train_task_model(samples, args.task, TaskHyper(epochs=args.epochs, lr=args.lr), seed=args.seed)
    path = ckpt.save(_out(args.out))
    print(f"task checkpoint {path} digest {ckpt.digest()[:12]}")
    return 0


def cmd_calibrate(args) -> int:
    task = TaskCheckpoint.load(args.task_ckpt)
    t_model = calibrate_thresholds(task, io.load_samples(args.data, "source"), args.quantile)
    rec = {"t_model": t_model, "quantile": args.quantile, "t_pre": PAPER_T_PRE[task.task],
           "reference_t_model": PAPER_T_MODEL[task.task]}
    if args.out:
        io.write_json(_out(args.out), rec)
    print(json.dumps(rec))
    return 0


def cmd_align(args) -> int:
    diffusion = DiffusionCheckpoint.load(args.diffusion_ckpt)
    task = TaskCheckpoint.load(args.task_ckpt)
    config = AlignmentConfig.for_task(task.task, m=args.m, n=args.n, seed=args.seed, ddim_steps=args.steps,
                                      **{k: v for k, v in (("t_model", args.t_model), ("t_pre", args.t_pre)) if v is not None})
    producer = ProducerConfig.for_task(task.task, args.m)
    samples = io.load_samples(args.target)
    records = pipeline.align_dataset(samples, diffusion, task, producer, config, _out(args.out),
                                     resume=args.resume, dump_intermediates=args.dump_intermediates)
    fallback = sum(r["fallback_used"] for r in records)
    print(f"aligned {len(records)} images into {_out(args.out)} ({fallback} used the fallback)")
    return 0


def cmd_evaluate(args) -> int:
    task = TaskCheckpoint.load(args.task_ckpt)
    samples = io.load_samples(args.data)
    reports = {}
    reports["source_only"], _ = pipeline.compare_source_only(task, samples)
    if args.aligned:
        preds = [pipeline._prediction_from_record(task.task, json.loads((Path(args.aligned) / f"{s.id}.json").read_text()),
                                                  s.image.shape) for s in samples]
        reports["aligned"] = pipeline.evaluate_predictions(task.task, preds, samples)
    rows = pipeline.comparison_rows(task.task, reports)
    _print_table(rows)
    if args.out:
        out = _out(args.out)
        io.write_json(out / "evaluation.json", reports)
        pipeline.write_csv(out / "comparison.csv", rows)
        plots.metric_bars(rows, task.task, out / "comparison.png")
    return 0


def _print_table(rows: list[dict]) -> None:
    cols = list(rows[0])
    print("  ".join(f"{c:>22}" for c in cols))
    for r in rows:
        print("  ".join(f"{pipeline._fmt(r[c]):>22}" for c in cols))


def cmd_measure(args) -> int:
    if args.kind == "cimt":
        value = cimt_from_mask(io.read_image(args.mask) > 0.5, args.spacing)
        print(json.dumps({"cimt_mm": value}))
        return 0
    series_path = Path(args.series)
    files = sorted(series_path.glob("*.json")) if series_path.is_dir() else [series_path]
    slices = []
    for f in files:
        rec = json.loads(f.read_text())
        items = rec if isinstance(rec, list) else [rec]
        for item in items:
            fp = item.get("final_prediction") if isinstance(item, dict) else None
            lm = (fp or {}).get("landmarks", []) if isinstance(item, dict) else item
            slices.append(np.asarray(lm, dtype=np.float64).reshape(-1, 2))
    angle = curvature_proxy_from_series(ScanSeries(slices, args.slice_spacing, args.pixel_spacing))
    print(json.dumps({"curvature_deg": angle, "num_slices": len(slices)}))
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    run_dir = pipeline.run_pipeline(cfg, resume=args.resume, dump_intermediates=args.dump_intermediates,
                                    stop_after=args.stop_after)
    print(f"run directory {run_dir}")
    report = run_dir / "reports" / "report.md"
    if report.exists():
        print(report.read_text())
    return 0


def cmd_report(args) -> int:
    print(pipeline.write_report(args.run).read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stylealign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="render a synthetic annotated dataset")
    s.add_argument("--task", choices=["detection", "segmentation"], default="detection")
    s.add_argument("--style", choices=["source", "target"], default="source")
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--start", type=int, default=0, help="first sample index")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data, cmd_stage="synth-data")

    s = sub.add_parser("train-diffusion", help="train the base model or its control branch")
    s.add_argument("--data", required=True)
    s.add_argument("--stage", choices=["base", "control"], default="base")
    s.add_argument("--base-ckpt")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_diffusion, cmd_stage="train-diffusion")

    s = sub.add_parser("train-task", help="train the evidential task model on source data")
    s.add_argument("--data", required=True)
    s.add_argument("--task", choices=["detection", "segmentation"], default="detection")
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_task, cmd_stage="train-task")

    s = sub.add_parser("calibrate", help="model-uncertainty threshold from source validation data")
    s.add_argument("--task-ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--quantile", type=float, default=0.95)
    s.add_argument("--out")
    s.set_defaults(func=cmd_calibrate, cmd_stage="calibrate")

    s = sub.add_parser("align", help="align target images with the frozen models")
    s.add_argument("--target", required=True, help="image file or dataset directory")
    s.add_argument("--diffusion-ckpt", required=True)
    s.add_argument("--task-ckpt", required=True)
    s.add_argument("--m", type=int, default=8)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--t-model", type=float)
    s.add_argument("--t-pre", type=float)
    s.add_argument("--steps", type=int, default=50, help="DDIM steps")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", action="store_true", help="skip images whose JSON already exists")
    s.add_argument("--dump-intermediates", action="store_true")
    s.set_defaults(func=cmd_align, cmd_stage="align")

    s = sub.add_parser("evaluate", help="source-only (and optionally aligned) metrics")
    s.add_argument("--task-ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--aligned", help="directory of alignment JSON files")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate, cmd_stage="evaluate")

    s = sub.add_parser("measure", help="downstream measurements")
    msub = s.add_subparsers(dest="kind", required=True)
    c = msub.add_parser("cimt")
    c.add_argument("--mask", required=True)
    c.add_argument("--spacing", type=float, required=True, help="mm per pixel, vertical")
    c = msub.add_parser("curvature")
    c.add_argument("--series", required=True, help="alignment JSON directory or a JSON list of landmark sets")
    c.add_argument("--slice-spacing", type=float, default=1.0)
    c.add_argument("--pixel-spacing", type=float, default=1.0)
    s.set_defaults(func=cmd_measure, cmd_stage="measure")

    s = sub.add_parser("run", help="full pipeline from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--dump-intermediates", action="store_true")
    s.add_argument("--stop-after", choices=pipeline.STAGES)
    s.set_defaults(func=cmd_run, cmd_stage="run")

    s = sub.add_parser("report", help="rebuild the markdown report of a run directory")
    s.add_argument("--run", required=True)
    s.set_defaults(func=cmd_report, cmd_stage="report")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ConfigurationError, MeasurementUnavailable, FileNotFoundError, ValueError) as exc:
        print(f"error: [{args.cmd_stage}] {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
