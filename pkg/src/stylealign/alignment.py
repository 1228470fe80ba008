"""Training-free alignment of one target image.

For each of ``m`` condition images the frozen diffusion model generates
``n`` source-style images; the frozen task model predicts on all of them.
Model uncertainty judges style, prediction spread judges structure, and the
best condition and its most confident prediction are kept.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .conditioning import ConditionImage, ProducerConfig, condition_sweep
from .diffusion.model import DiffusionCheckpoint, ddim_sample_batch
from .errors import ConfigurationError
from .evidential.model import Prediction, TaskCheckpoint, predict_batch
from .synthdata import AnnotatedSample

# thresholds reported for the clinical spine (detection) and carotid
# (segmentation) models; desk-scale runs calibrate T_model instead
PAPER_T_MODEL = {"detection": 0.0099, "segmentation": 0.1200}
PAPER_T_PRE = {"detection": 5.0, "segmentation": 0.3}


@dataclass
class AlignmentConfig:
    m: int = 8
    n: int = 4
    t_model: float = PAPER_T_MODEL["detection"]
    t_pre: float = PAPER_T_PRE["detection"]
    ddim_steps: int = 50
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.m < 1 or self.n < 1:
            raise ConfigurationError("m and n must be >= 1")
        if not (self.t_model > 0 and self.t_pre > 0):
            raise ConfigurationError("thresholds must be > 0")
        if self.ddim_steps < 1:
            raise ConfigurationError("ddim_steps must be >= 1")

    @classmethod
    def for_task(cls, task: str, **kw) -> "AlignmentConfig":
        kw.setdefault("t_model", PAPER_T_MODEL[task])
        kw.setdefault("t_pre", PAPER_T_PRE[task])
        return cls(**kw)


@dataclass
class AlignmentResult:
    conditions: list[ConditionImage]
    aligned: np.ndarray
    predictions: list[list[Prediction]]
    u_model: np.ndarray
    u_model_vec: np.ndarray
    u_pre: np.ndarray
    selected_condition: Optional[int]
    final_index: Optional[int]
    final_prediction: Optional[Prediction]
    fallback_used: bool
    config: AlignmentConfig

    def to_json(self) -> dict:
        clean = lambda a: [[None if not math.isfinite(v) else float(v) for v in row] for row in np.atleast_2d(a)]
        return {
            "config": asdict(self.config),
            "condition_params": [c.params for c in self.conditions],
            "u_model": clean(self.u_model),
            "u_model_vec": clean(self.u_model_vec)[0],
            "u_pre": clean(self.u_pre)[0],
            "selected_condition": self.selected_condition,
            "final_index": self.final_index,
            "fallback_used": self.fallback_used,
            "final_prediction": None if self.final_prediction is None else _finite(self.final_prediction.summary()),
        }


def _finite(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def _sorted_landmarks(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return coords[np.lexsort((coords[:, 0], coords[:, 1]))]


def prediction_uncertainty_detection(predictions: Sequence[np.ndarray]) -> float:
    """Mean distance of each landmark set to the mean set, in pixels.

    Landmarks are put in correspondence by sorting top-to-bottom, then
    left-to-right; the distance between two sets is the mean point-wise
    Euclidean distance. Unequal or empty sets give ``inf``.
    """
    sets = [_sorted_landmarks(p) for p in predictions]
    if not sets:
        raise ValueError("need at least one prediction")
    counts = {len(s) for s in sets}
    if len(counts) != 1 or 0 in counts:
        return math.inf
    stacked = np.stack(sets)
    mean = stacked.mean(axis=0)
    return float(np.linalg.norm(stacked - mean, axis=-1).mean())


def prediction_uncertainty_segmentation(masks: Sequence[np.ndarray]) -> float:
    """One minus intersection-over-union across all ``n`` masks; 1 for an empty union."""
    stacked = np.stack([np.asarray(m).astype(bool) for m in masks])
    union = np.logical_or.reduce(stacked).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and.reduce(stacked).sum()
    return float((union - inter) / union)


def _rank(u_pre: np.ndarray, u_model: np.ndarray, candidates: np.ndarray) -> int:
    order = np.lexsort((candidates, u_model[candidates], u_pre[candidates]))
    return int(candidates[order[0]])


def select_condition(u_model_vec: Sequence[float], u_pre_vec: Sequence[float], t_model: float, t_pre: float) -> Optional[int]:
    u_model = np.asarray(u_model_vec, dtype=np.float64)
    u_pre = np.asarray(u_pre_vec, dtype=np.float64)
    if u_model.shape != u_pre.shape:
        raise ValueError("uncertainty vectors differ in length")
    feasible = np.flatnonzero((u_model <= t_model) & (u_pre <= t_pre))
    if feasible.size == 0:
        return None
    return _rank(u_pre, u_model, feasible)


def fallback_condition(u_model_vec: Sequence[float], u_pre_vec: Sequence[float]) -> int:
    u_model = np.asarray(u_model_vec, dtype=np.float64)
    u_pre = np.asarray(u_pre_vec, dtype=np.float64)
    return _rank(u_pre, u_model, np.arange(len(u_pre)))


def select_final_prediction(predictions: Sequence[Prediction], u_model_row: Sequence[float]) -> tuple[int, Prediction]:
    if len(predictions) == 0:
        raise ValueError("need at least one prediction")
    idx = int(np.argmin(np.asarray(u_model_row, dtype=np.float64)))
    return idx, predictions[idx]


def stream_seed(seed: int, condition_index: int, sample_index: int) -> int:
    return int(np.random.SeedSequence([seed, condition_index, sample_index]).generate_state(1)[0])


def _row_mean(row: np.ndarray) -> float:
    return float(row.mean()) if np.all(np.isfinite(row)) else math.inf


def align_image(
    target: np.ndarray,
    diffusion: DiffusionCheckpoint,
    task: TaskCheckpoint,
    producer: ProducerConfig,
    config: AlignmentConfig,
) -> AlignmentResult:
    if diffusion.stage != "controlled":
        raise ValueError("alignment needs a controlled diffusion checkpoint")
    target = np.asarray(target, dtype=np.float32)
    if producer.m != config.m:
        producer = replace(producer, m=config.m)
    m, n = config.m, config.n
    conditions = condition_sweep(target, producer, seed=config.seed)

    grids = [conditions[i].grid for i in range(m) for _ in range(n)]
    seeds = [stream_seed(config.seed, i, j) for i in range(m) for j in range(n)]
    chunks = []
    for s in range(0, m * n, config.batch_size):
        chunks.append(ddim_sample_batch(diffusion, grids[s:s + config.batch_size], config.ddim_steps,
                                        seeds[s:s + config.batch_size]))
    aligned = np.concatenate(chunks).reshape(m, n, *target.shape)

    flat = predict_batch(task, aligned.reshape(m * n, *target.shape))
    predictions = [flat[i * n:(i + 1) * n] for i in range(m)]
    u_model = np.array([[p.model_uncertainty for p in row] for row in predictions], dtype=np.float64)
    u_model_vec = np.array([_row_mean(row) for row in u_model])
    if task.task == "detection":
        u_pre = np.array([prediction_uncertainty_detection([p.landmarks for p in row]) for row in predictions])
    else:
        u_pre = np.array([prediction_uncertainty_segmentation([p.mask for p in row]) for row in predictions])

    selected = select_condition(u_model_vec, u_pre, config.t_model, config.t_pre)
    fallback = selected is None
    chosen = fallback_condition(u_model_vec, u_pre) if fallback else selected
    final_index, final = select_final_prediction(predictions[chosen], u_model[chosen])
    return AlignmentResult(conditions, aligned, predictions, u_model, u_model_vec, u_pre,
                           chosen, final_index, final, fallback, config)


def calibrate_thresholds(task: TaskCheckpoint, source_validation: Sequence[AnnotatedSample], quantile: float = 0.95) -> float:
    """T_model as the ``quantile`` of per-image model uncertainty on held-out source images.

    Uses the inverted empirical CDF, so at least ``quantile`` of the
    calibration images fall at or below the returned threshold.
    """
    if not source_validation:
        raise ConfigurationError("empty calibration set")
    if not 0 < quantile <= 1:
        raise ConfigurationError("quantile must be in (0, 1]")
    preds = predict_batch(task, np.stack([s.image for s in source_validation]))
    values = np.array([p.model_uncertainty for p in preds], dtype=np.float64)
    return float(np.quantile(values, quantile, method="inverted_cdf"))
