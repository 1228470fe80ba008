"""Downstream measurements from task outputs.

``curvature_proxy_from_series`` is a reproducible stand-in for a Cobb-style angle, not a
clinical curvature algorithm: it takes the per-slice landmark centroids of a
scan, smooths the lateral-deviation curve with a moving average and returns
the spread between the most and least inclined segments.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MeasurementUnavailable

SMOOTHING_WINDOW = 5


@dataclass
class ScanSeries:
    slices: Sequence[np.ndarray]
    slice_spacing: float = 1.0
    pixel_spacing: float = 1.0

    def __post_init__(self) -> None:
        if self.slice_spacing <= 0 or self.pixel_spacing <= 0:
            raise ValueError("spacings must be positive")


def cimt_from_mask(mask: np.ndarray, vertical_spacing: float) -> float:
    """Average vertical extent of the mask over occupied columns, in mm.

    The extent of a column is max row - min row + 1, so interior holes do
    not shorten it.
    """
    fg = np.asarray(mask).astype(bool)
    if fg.ndim != 2:
        raise ValueError("mask must be 2-D")
    cols = np.flatnonzero(fg.any(axis=0))
    if cols.size == 0:
        raise MeasurementUnavailable("empty mask")
    heights = []
    for c in cols:
        rows = np.flatnonzero(fg[:, c])
        heights.append(rows[-1] - rows[0] + 1)
    return float(np.mean(heights) * vertical_spacing)


def _moving_average(values: np.ndarray, window: int) -> np.ndarray:
    return np.convolve(values, np.ones(window) / window, mode="valid")


def curvature_proxy_from_series(series: ScanSeries, window: int = SMOOTHING_WINDOW) -> float:
    """Angle in degrees between the most and least inclined smoothed segments."""
    xs, zs = [], []
    for k, landmarks in enumerate(series.slices):
        lm = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
        if len(lm) == 0:
            continue
        xs.append(lm[:, 0].mean() * series.pixel_spacing)
        zs.append(k * series.slice_spacing)
    if len(xs) < 3:
        raise MeasurementUnavailable(f"need >= 3 slices with detections, got {len(xs)}")
    x = np.asarray(xs)
    z = np.asarray(zs)
    # keep at least two smoothed points
    w = min(window, len(x) - 1)
    if w % 2 == 0:
        w -= 1
    xs_s = _moving_average(x, w)
    zs_s = _moving_average(z, w)
    angles = np.degrees(np.arctan2(np.diff(xs_s), np.diff(zs_s)))
    return float(angles.max() - angles.min())
