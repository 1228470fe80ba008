"""Detection, segmentation and agreement statistics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment


@dataclass
class DetectionReport:
    accuracy: float
    recall: float
    f1: float
    mean_error: Optional[float]
    num_predicted: int
    num_truth: int
    num_matched: int
    matched: list = field(default_factory=list)

    def mean_error_mm(self, spacing: float) -> Optional[float]:
        return None if self.mean_error is None else self.mean_error * spacing

    def to_dict(self, with_pairs: bool = False) -> dict:
        d = asdict(self)
        if not with_pairs:
            d.pop("matched")
        return d


@dataclass
class AgreementReport:
    n: int
    bias: float
    sd: float
    loa_low: float
    loa_high: float
    mean_abs_diff: float
    r: Optional[float] = None
    r2: Optional[float] = None
    p_value: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def match_landmarks(pred: np.ndarray, truth: np.ndarray, radius: float = 10.0) -> list[tuple[int, int, float]]:
    """One-to-one matching within ``radius``.

    Maximizes the number of matched pairs, then minimizes their summed
    distance. Returns (pred index, truth index, distance) triples.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0 or len(truth) == 0:
        return []
    dist = np.linalg.norm(pred[:, None, :] - truth[None, :, :], axis=-1)
    within = dist <= radius
    # a missed pair must cost more than any feasible set of matched ones
    penalty = radius * (min(len(pred), len(truth)) + 1) + 1.0
    cost = np.where(within, dist, penalty)
    rows, cols = linear_sum_assignment(cost)
    return [(int(i), int(j), float(dist[i, j])) for i, j in zip(rows, cols) if within[i, j]]


def detection_metrics(pred_sets: Sequence[np.ndarray], truth_sets: Sequence[np.ndarray], radius: float = 10.0) -> DetectionReport:
    """Percent accuracy (matched / predicted), recall (matched / truth) and F1 over a set of images."""
    if len(pred_sets) != len(truth_sets):
        raise ValueError("pred_sets and truth_sets must be parallel lists")
    n_pred = n_truth = 0
    pairs = []
    for k, (p, t) in enumerate(zip(pred_sets, truth_sets)):
        p = np.asarray(p).reshape(-1, 2)
        t = np.asarray(t).reshape(-1, 2)
        n_pred += len(p)
        n_truth += len(t)
        pairs.extend((k, i, j, d) for i, j, d in match_landmarks(p, t, radius))
    if n_truth == 0:
        raise ValueError("recall undefined: no ground-truth landmarks")
    matched = len(pairs)
    accuracy = 100.0 * matched / n_pred if n_pred else 0.0
    recall = 100.0 * matched / n_truth
    f1 = 2 * accuracy * recall / (accuracy + recall) if accuracy + recall > 0 else 0.0
    mean_error = float(np.mean([d for *_, d in pairs])) if pairs else None
    return DetectionReport(accuracy, recall, f1, mean_error, n_pred, n_truth, matched, pairs)


def dice_iou(pred_mask: np.ndarray, truth_mask: np.ndarray) -> tuple[float, float]:
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(truth_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0, 1.0
    union = np.logical_or(a, b).sum()
    return float(2 * inter / total), float(inter / union)


def segmentation_metrics(pred_masks: Sequence[np.ndarray], truth_masks: Sequence[np.ndarray]) -> dict:
    scores = np.array([dice_iou(p, t) for p, t in zip(pred_masks, truth_masks)])
    return {"dice": float(100 * scores[:, 0].mean()), "iou": float(100 * scores[:, 1].mean()), "n": len(scores)}


def bland_altman(a: Sequence[float], b: Sequence[float]) -> AgreementReport:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"series lengths differ: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two paired measurements")
    d = a - b
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return AgreementReport(len(d), bias, sd, bias - 1.96 * sd, bias + 1.96 * sd, float(np.abs(d).mean()))


def correlation_r2(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """Pearson r, R^2 of the least-squares line and the two-sided p-value of r."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 3:
        raise ValueError("need two equal-length series of at least 3 values")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("correlation undefined for a constant series")
    res = stats.linregress(a, b)
    r = float(np.clip(res.rvalue, -1.0, 1.0))
    return r, r * r, float(res.pvalue)


def agreement(a: Sequence[float], b: Sequence[float]) -> AgreementReport:
    rep = bland_altman(a, b)
    if rep.n >= 3:
        try:
            rep.r, rep.r2, rep.p_value = correlation_r2(a, b)
        except ValueError:
            pass
    return rep
