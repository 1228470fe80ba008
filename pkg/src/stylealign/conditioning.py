"""Condition images for spatial control. None of these producers has trainable state."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ConfigurationError
from .synthdata import AnnotatedSample

Producer = Literal["threshold_mask", "noise_perturb", "annotation_optimal"]

LANDMARK_DISK_RADIUS = 3.0


@dataclass
class ConditionImage:
    grid: np.ndarray
    producer: Producer
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ProducerConfig:
    kind: Literal["threshold_mask", "noise_perturb"] = "threshold_mask"
    sweep_min: float = 0.3
    sweep_max: float = 0.7
    m: int = 8

    def __post_init__(self) -> None:
        if self.kind not in ("threshold_mask", "noise_perturb"):
            raise ConfigurationError(f"unknown producer {self.kind!r}")
        if self.m < 1:
            raise ConfigurationError("m must be >= 1")
        if not self.sweep_min < self.sweep_max:
            raise ConfigurationError("sweep_min must be < sweep_max")

    @classmethod
    def for_task(cls, task: str, m: int = 8) -> "ProducerConfig":
        if task == "detection":
            return cls("threshold_mask", 0.3, 0.7, m)
        return cls("noise_perturb", 0.05, 0.3, m)

    def values(self) -> np.ndarray:
        if self.m == 1:
            return np.array([self.sweep_min])
        return np.linspace(self.sweep_min, self.sweep_max, self.m)


def threshold_mask_condition(image: np.ndarray, threshold: float) -> ConditionImage:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    grid = (np.asarray(image) >= threshold).astype(np.float32)
    return ConditionImage(grid, "threshold_mask", {"threshold": float(threshold)})


def noise_perturb_condition(image: np.ndarray, sigma: float, seed: int = 0) -> ConditionImage:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    image = np.asarray(image, dtype=np.float32)
    if sigma == 0:
        return ConditionImage(image.copy(), "noise_perturb", {"sigma": 0.0, "seed": seed})
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=image.shape)
    grid = np.clip(image + noise, 0.0, 1.0).astype(np.float32)
    return ConditionImage(grid, "noise_perturb", {"sigma": float(sigma), "seed": seed})


def landmark_disks(shape: tuple[int, int], landmarks: np.ndarray, radius: float = LANDMARK_DISK_RADIUS) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    out = np.zeros(shape, dtype=np.float32)
    for x, y in np.asarray(landmarks).reshape(-1, 2):
        out[(xx - x) ** 2 + (yy - y) ** 2 <= radius**2] = 1.0
    return out


def optimal_condition_from_annotation(sample: AnnotatedSample, radius: float = LANDMARK_DISK_RADIUS) -> ConditionImage:
    """Condition built from the truth: landmark disks, or the truth mask itself."""
    shape = sample.image.shape
    if sample.landmarks is not None:
        if len(sample.landmarks) == 0:
            warnings.warn(f"{sample.id}: no landmarks, condition is empty", stacklevel=2)
        grid = landmark_disks(shape, sample.landmarks, radius)
        return ConditionImage(grid, "annotation_optimal", {"radius": radius})
    if sample.mask is not None:
        if not sample.mask.any():
            warnings.warn(f"{sample.id}: empty mask, condition is empty", stacklevel=2)
        return ConditionImage(sample.mask.astype(np.float32), "annotation_optimal", {})
    raise ValueError(f"{sample.id}: sample has no annotation")


def condition_sweep(image: np.ndarray, config: ProducerConfig, seed: int = 0) -> list[ConditionImage]:
    """``config.m`` conditions with the producer parameter evenly spaced over the sweep."""
    out = []
    for i, value in enumerate(config.values()):
        if config.kind == "threshold_mask":
            out.append(threshold_mask_condition(image, float(value)))
        else:
            out.append(noise_perturb_condition(image, float(value), seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0])))
    return out
