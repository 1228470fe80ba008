"""Experiment orchestration: data, training, calibration, alignment, evaluation, measurement, report.

Every stage writes its outputs under one run directory. With ``resume`` a
stage whose outputs already exist is skipped, so an interrupted run can be
continued without recomputing finished work.
"""
from __future__ import annotations

import json
import logging
import math
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import io, plots
from .alignment import AlignmentConfig, AlignmentResult, align_image, calibrate_thresholds
from .conditioning import ProducerConfig, optimal_condition_from_annotation
from .config import ExperimentConfig
from .diffusion.model import DiffusionCheckpoint, train_base, train_control
from .errors import ConfigurationError, MeasurementUnavailable
from .evidential.model import Prediction, TaskCheckpoint, predict_batch, train_task_model
from .measure import ScanSeries, cimt_from_mask, curvature_proxy_from_series
from .metrics import agreement, detection_metrics, segmentation_metrics
from .synthdata import SOURCE_STYLE, AnnotatedSample, generate_dataset

log = logging.getLogger(__name__)

STAGES = ("data", "diffusion_base", "diffusion_control", "task", "calibrate", "align", "evaluate", "measure", "report")
# slices per pseudo-scan when building curvature series from independent detection images
SCAN_LENGTH = 10


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunPaths:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    def data(self, split: str) -> Path:
        return self.root / "data" / split

    @property
    def diffusion_base(self) -> Path:
        return self.root / "checkpoints" / "diffusion_base.pt"

    @property
    def diffusion_control(self) -> Path:
        return self.root / "checkpoints" / "diffusion_control.pt"

    @property
    def task(self) -> Path:
        return self.root / "checkpoints" / "task.pt"

    @property
    def calibration(self) -> Path:
        return self.root / "calibration.json"

    @property
    def align_dir(self) -> Path:
        return self.root / "align"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


# ---------------------------------------------------------------- evaluation


def _finite_mean(values: Sequence[float]) -> Optional[float]:
    v = [x for x in values if math.isfinite(x)]
    return float(np.mean(v)) if v else None


def evaluate_predictions(task: str, predictions: Sequence[Prediction], samples: Sequence[AnnotatedSample]) -> dict:
    """Task metrics plus model-uncertainty summaries for predictions aligned with ``samples``."""
    if len(predictions) != len(samples):
        raise ValueError("one prediction per sample required")
    if task == "detection":
        out = detection_metrics([p.landmarks for p in predictions], [s.landmarks for s in samples]).to_dict()
        spacing = samples[0].pixel_spacing
        out["mean_error_mm"] = None if out["mean_error"] is None else out["mean_error"] * spacing
    else:
        out = segmentation_metrics([p.mask for p in predictions], [s.mask for s in samples])
    u = [p.model_uncertainty for p in predictions]
    out["mean_model_uncertainty"] = _finite_mean(u)
    out["num_without_output"] = int(sum(not math.isfinite(x) for x in u))
    map_mean = float(np.mean([p.umap.mean() for p in predictions]))
    out["mean_uncertainty_map"] = map_mean if math.isfinite(map_mean) else None
    out["n_images"] = len(samples)
    # per image, in sample order; no output serializes as null
    out["model_uncertainties"] = [float(x) for x in u]
    return out


def compare_source_only(task_ckpt: TaskCheckpoint, samples: Sequence[AnnotatedSample]) -> tuple[dict, list[Prediction]]:
    """Metrics of the source-trained model applied directly to ``samples`` (no alignment)."""
    preds = predict_batch(task_ckpt, np.stack([s.image for s in samples]))
    return evaluate_predictions(task_ckpt.task, preds, samples), preds


def comparison_rows(task: str, reports: dict) -> list[dict]:
    keys = ["accuracy", "recall", "f1", "mean_error"] if task == "detection" else ["dice", "iou"]
    keys += ["mean_model_uncertainty", "mean_uncertainty_map", "num_without_output"]
    return [{"method": name, **{k: rep.get(k) for k in keys}} for name, rep in reports.items()]


def write_csv(path: Path, rows: list[dict]) -> None:
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(io.json_safe(rows))


# ---------------------------------------------------------------- alignment


def align_dataset(
    samples: Sequence[AnnotatedSample],
    diffusion: DiffusionCheckpoint,
    task_ckpt: TaskCheckpoint,
    producer: ProducerConfig,
    config: AlignmentConfig,
    out_dir: Path,
    resume: bool = False,
    dump_intermediates: bool = False,
) -> list[dict]:
    """Align every sample, writing ``<id>.json`` per image; returns the JSON records in input order."""
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for k, s in enumerate(samples):
        path = out_dir / f"{s.id}.json"
        if resume and path.exists():
            records.append(json.loads(path.read_text()))
            continue
        t0 = time.perf_counter()
        res = align_image(s.image, diffusion, task_ckpt, producer, config)
        rec = {"id": s.id, **res.to_json(), "seconds": time.perf_counter() - t0}
        io.write_json(path, rec)
        if dump_intermediates:
            dump_alignment(res, s, out_dir / "intermediates")
        records.append(rec)
        log.info("aligned %s (%d/%d) cond=%s fallback=%s in %.1fs", s.id, k + 1, len(samples),
                 res.selected_condition, res.fallback_used, rec["seconds"])
    return records


def dump_alignment(res: AlignmentResult, sample: AnnotatedSample, out_dir: Path) -> None:
    base = out_dir / sample.id
    io.write_png8(base.with_name(f"{sample.id}_target.png"), sample.image)
    for i, c in enumerate(res.conditions):
        io.write_png8(base.with_name(f"{sample.id}_cond{i}.png"), c.grid)
        for j in range(res.aligned.shape[1]):
            io.write_png8(base.with_name(f"{sample.id}_aligned{i}_{j}.png"), res.aligned[i, j])
    plots.alignment_overlay(res, sample, base.with_name(f"{sample.id}_overlay.png"))


def _prediction_from_record(task: str, rec: dict, shape: tuple[int, int]) -> Prediction:
    """Rebuild the parts of a final prediction that evaluation needs from its JSON record."""
    fp = rec["final_prediction"] or {}
    u = fp.get("model_uncertainty")
    u = math.inf if u is None else float(u)
    umap = np.full(shape, np.nan)  # maps are not kept in the record
    if task == "detection":
        lm = np.asarray(fp.get("landmarks", []), dtype=np.float64).reshape(-1, 2)
        return Prediction(task, None, umap, u, landmarks=lm,
                          channels=np.asarray(fp.get("channels", []), dtype=np.int64))
    mask = io.rle_decode(fp["mask_rle"], shape) if "mask_rle" in fp else np.zeros(shape, np.uint8)
    return Prediction(task, None, umap, u, mask=mask)


# ---------------------------------------------------------------- measurement


def curvature_series(landmark_sets: Sequence[np.ndarray], pixel_spacing: float, length: int = SCAN_LENGTH) -> list[ScanSeries]:
    """Group consecutive per-image detections into pseudo-scans of ``length`` slices."""
    return [ScanSeries(list(landmark_sets[i:i + length]), 1.0, pixel_spacing)
            for i in range(0, len(landmark_sets) - length + 1, length)]


def measure_agreement(task: str, truth: Sequence[AnnotatedSample], predicted: dict[str, list[np.ndarray]]) -> dict:
    """Downstream measurements per method, paired with the truth-derived value, plus agreement stats."""
    out = {}
    if task == "segmentation":
        ref = []
        for s in truth:
            ref.append(cimt_from_mask(s.mask, s.pixel_spacing))
        for name, masks in predicted.items():
            pairs = []
            for r, m, s in zip(ref, masks, truth):
                try:
                    pairs.append((cimt_from_mask(m, s.pixel_spacing), r))
                except MeasurementUnavailable:
                    continue
            out[name] = _agreement_block(pairs, "cimt_mm", len(truth))
    else:
        spacing = truth[0].pixel_spacing
        ref_series = curvature_series([s.landmarks for s in truth], spacing)
        ref = [curvature_proxy_from_series(sr) for sr in ref_series]
        for name, sets in predicted.items():
            pairs = []
            for r, sr in zip(ref, curvature_series(sets, spacing)):
                try:
                    pairs.append((curvature_proxy_from_series(sr), r))
                except MeasurementUnavailable:
                    continue
            out[name] = _agreement_block(pairs, "curvature_deg", len(ref))
    return out


def _agreement_block(pairs: list[tuple[float, float]], quantity: str, total: int) -> dict:
    block = {"quantity": quantity, "measured": [p for p, _ in pairs], "reference": [r for _, r in pairs],
             "n_available": len(pairs), "n_total": total}
    if len(pairs) >= 2:
        block["agreement"] = agreement(block["measured"], block["reference"]).to_dict()
    return block


# ---------------------------------------------------------------- pipeline


def _versions() -> dict:
    return {"python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__}


def _load_split(cfg: ExperimentConfig, paths: RunPaths, split: str) -> list[AnnotatedSample]:
    if cfg.data.synthetic is not None:
        return io.load_samples(paths.data(split))
    src = {"train": cfg.data.source_train, "val": cfg.data.source_val, "target": cfg.data.target_eval}[split]
    return io.load_samples(src, "target" if split == "target" else "source")


class _Manifest:
    def __init__(self, path: Path, cfg: ExperimentConfig, resume: bool):
        self.path = path
        if path.exists():
            old = json.loads(path.read_text())
            if not resume:
                raise ConfigurationError(f"{path.parent} already holds a run; pass --resume or change name/output_root")
            if old["config_digest"] != cfg.digest():
                raise ConfigurationError(f"{path.parent} was created with a different config")
            self.data = old
        else:
            self.data = {"config_digest": cfg.digest(), "seed": cfg.seed, "config": cfg.model_dump(mode="json"),
                         "versions": _versions(), "stages": {}}
        self.save()

    def done(self, stage: str) -> bool:
        return self.data["stages"].get(stage, {}).get("status") == "done"

    def mark(self, stage: str, status: str, **extra) -> None:
        self.data["stages"][stage] = {"status": status, **extra}
        self.save()

    def save(self) -> None:
        io.write_json(self.path, self.data)


def run_pipeline(cfg: ExperimentConfig, resume: bool = False, dump_intermediates: bool = False,
                 stop_after: Optional[str] = None) -> Path:
    """Run every stage in order and return the run directory.

    A failing stage raises :class:`PipelineError` tagged with the stage name;
    outputs of earlier stages stay on disk.
    """
    cfg.check_paths()
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigurationError(f"unknown stage {stop_after!r}")
    torch.set_num_threads(1)
    paths = RunPaths(cfg.resolved_output_root() / cfg.name)
    paths.root.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(paths.manifest, cfg, resume)
    state: dict = {}

    stages: dict[str, Callable[[], dict]] = {
        "data": lambda: _stage_data(cfg, paths),
        "diffusion_base": lambda: _stage_diffusion_base(cfg, paths),
        "diffusion_control": lambda: _stage_diffusion_control(cfg, paths),
        "task": lambda: _stage_task(cfg, paths),
        "calibrate": lambda: _stage_calibrate(cfg, paths),
        "align": lambda: _stage_align(cfg, paths, resume, dump_intermediates),
        "evaluate": lambda: _stage_evaluate(cfg, paths, state),
        "measure": lambda: _stage_measure(cfg, paths),
        "report": lambda: {"report": str(write_report(paths.root))},
    }
    for name in STAGES:
        if resume and manifest.done(name):
            log.info("stage %s: outputs present, skipped", name)
        else:
            log.info("stage %s: start", name)
            t0 = time.perf_counter()
            manifest.mark(name, "running")
            try:
                extra = stages[name]() or {}
            except Exception as exc:
                manifest.mark(name, "failed", error=f"{type(exc).__name__}: {exc}")
                raise PipelineError(name, exc) from exc
            manifest.mark(name, "done", seconds=round(time.perf_counter() - t0, 2), **extra)
        if name == stop_after:
            break
    return paths.root


def _stage_data(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    if cfg.data.synthetic is None:
        counts = {split: len(_load_split(cfg, paths, split)) for split in ("train", "val", "target")}
        return {"counts": counts}
    syn = cfg.data.synthetic
    spec = cfg.scene_spec()
    # disjoint index ranges keep the three splits geometrically distinct
    splits = {
        "train": generate_dataset(spec, SOURCE_STYLE, syn.train, cfg.seed, "source", 0),
        "val": generate_dataset(spec, SOURCE_STYLE, syn.val, cfg.seed, "source", syn.train),
        "target": generate_dataset(spec, syn.target_style.build(), syn.target, cfg.seed, "target", syn.train + syn.val),
    }
    for split, samples in splits.items():
        io.save_samples(samples, paths.data(split))
    return {"counts": {k: len(v) for k, v in splits.items()}}


def _stage_diffusion_base(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    train = _load_split(cfg, paths, "train")
    ckpt = train_base(np.stack([s.image for s in train]), cfg.diffusion.hyper("base"), seed=cfg.seed)
    ckpt.save(paths.diffusion_base)
    return {"digest": ckpt.digest(), "final_loss": ckpt.training_meta["loss_curve"][-1]}


def _stage_diffusion_control(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    train = _load_split(cfg, paths, "train")
    base = DiffusionCheckpoint.load(paths.diffusion_base)
    conds = np.stack([optimal_condition_from_annotation(s).grid for s in train])
    ckpt = train_control(np.stack([s.image for s in train]), conds, base, cfg.diffusion.hyper("control"), seed=cfg.seed)
    ckpt.save(paths.diffusion_control)
    return {"digest": ckpt.digest(), "final_loss": ckpt.training_meta["loss_curve"][-1]}


def _stage_task(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    ckpt = train_task_model(_load_split(cfg, paths, "train"), cfg.task, cfg.task_model.hyper(), seed=cfg.seed)
    ckpt.save(paths.task)
    return {"digest": ckpt.digest()}


def _stage_calibrate(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    task = TaskCheckpoint.load(paths.task)
    val = _load_split(cfg, paths, "val")
    q = cfg.alignment.calibration_quantile
    calibrated = calibrate_thresholds(task, val, q)
    t_model = cfg.alignment.t_model if cfg.alignment.t_model is not None else calibrated
    values = [p.model_uncertainty for p in predict_batch(task, np.stack([s.image for s in val]))]
    passing = sum(v <= t_model for v in values)
    rec = {"t_model": t_model, "calibrated_t_model": calibrated, "quantile": q,
           "t_pre": cfg.alignment_config(t_model).t_pre, "source_val_uncertainty": values,
           "pass_fraction": passing / len(values)}
    io.write_json(paths.calibration, rec)
    return {"t_model": t_model, "pass_fraction": rec["pass_fraction"]}


def _stage_align(cfg: ExperimentConfig, paths: RunPaths, resume: bool, dump: bool) -> dict:
    diffusion = DiffusionCheckpoint.load(paths.diffusion_control)
    task = TaskCheckpoint.load(paths.task)
    t_model = json.loads(paths.calibration.read_text())["t_model"]
    before = (diffusion.digest(), task.digest())
    records = align_dataset(_load_split(cfg, paths, "target"), diffusion, task, cfg.producer_config(),
                            cfg.alignment_config(t_model), paths.align_dir, resume, dump)
    if (diffusion.digest(), task.digest()) != before:
        raise RuntimeError("model weights changed during alignment")
    return {"num_images": len(records), "num_fallback": sum(r["fallback_used"] for r in records)}


def _aligned_predictions(task: str, paths: RunPaths, samples: Sequence[AnnotatedSample]) -> list[Prediction]:
    preds = []
    for s in samples:
        rec = json.loads((paths.align_dir / f"{s.id}.json").read_text())
        preds.append(_prediction_from_record(task, rec, s.image.shape))
    return preds


def _stage_evaluate(cfg: ExperimentConfig, paths: RunPaths, state: dict) -> dict:
    task = TaskCheckpoint.load(paths.task)
    val = _load_split(cfg, paths, "val")
    target = _load_split(cfg, paths, "target")
    reports = {}
    reports["source_validation"], _ = compare_source_only(task, val)
    reports["source_only"], _ = compare_source_only(task, target)
    aligned = _aligned_predictions(cfg.task, paths, target)
    reports["aligned"] = evaluate_predictions(cfg.task, aligned, target)
    io.write_json(paths.reports / "evaluation.json", reports)
    rows = comparison_rows(cfg.task, reports)
    write_csv(paths.reports / "comparison.csv", rows)
    plots.metric_bars(rows, cfg.task, paths.reports / "comparison.png")
    key = "f1" if cfg.task == "detection" else "dice"
    return {key: {k: v.get(key) for k, v in reports.items()}}


def _stage_measure(cfg: ExperimentConfig, paths: RunPaths) -> dict:
    task = TaskCheckpoint.load(paths.task)
    target = _load_split(cfg, paths, "target")
    raw = predict_batch(task, np.stack([s.image for s in target]))
    aligned = _aligned_predictions(cfg.task, paths, target)
    field_name = "landmarks" if cfg.task == "detection" else "mask"
    predicted = {"source_only": [getattr(p, field_name) for p in raw],
                 "aligned": [getattr(p, field_name) for p in aligned]}
    try:
        result = measure_agreement(cfg.task, target, predicted)
    except MeasurementUnavailable as exc:
        result = {"unavailable": str(exc)}
    io.write_json(paths.reports / "measurement.json", result)
    for name, block in result.items():
        if isinstance(block, dict) and "agreement" in block:
            plots.agreement_plot(block["measured"], block["reference"], block["quantity"],
                                 paths.reports / f"agreement_{name}.png")
    return {}


def write_report(run_dir) -> Path:
    """Markdown summary from the JSON outputs of a run directory."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    lines = [f"# Run `{run_dir.name}`", "", f"- config digest: `{manifest['config_digest']}`",
             f"- seed: {manifest['seed']}", f"- task: {manifest['config']['task']}", ""]
    cal = run_dir / "calibration.json"
    if cal.exists():
        c = json.loads(cal.read_text())
        lines += [f"T_model = {c['t_model']:.6g} (quantile {c['quantile']}), T_pre = {c['t_pre']}, "
                  f"source validation pass fraction {c['pass_fraction']:.3f}", ""]
    ev = run_dir / "reports" / "evaluation.json"
    if ev.exists():
        reports = json.loads(ev.read_text())
        rows = comparison_rows(manifest["config"]["task"], reports)
        cols = list(rows[0])
        lines += ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for r in rows:
            lines.append("| " + " | ".join(_fmt(r[c]) for c in cols) + " |")
        lines.append("")
    ms = run_dir / "reports" / "measurement.json"
    if ms.exists():
        for name, block in json.loads(ms.read_text()).items():
            if isinstance(block, dict) and "agreement" in block:
                a = block["agreement"]
                lines.append(f"- {name} {block['quantity']}: bias {_fmt(a['bias'])}, sd {_fmt(a['sd'])}, "
                             f"limits ({_fmt(a['loa_low'])}, {_fmt(a['loa_high'])}), r {_fmt(a['r'])}, "
                             f"n {block['n_available']}/{block['n_total']}")
    stages = manifest.get("stages", {})
    lines += ["", "| stage | status | seconds |", "|---|---|---|"]
    lines += [f"| {k} | {v.get('status')} | {v.get('seconds', '')} |" for k, v in stages.items()]
    out = run_dir / "reports" / "report.md"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    return out


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
