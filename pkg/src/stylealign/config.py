"""Experiment configuration: one YAML/JSON file validated against a strict schema."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .alignment import PAPER_T_PRE, AlignmentConfig
from .conditioning import ProducerConfig
from .diffusion.model import DiffusionHyper
from .errors import ConfigurationError
from .evidential.model import TaskHyper
from .synthdata import TARGET_STYLE, SceneSpec, StyleParams

OUTPUT_ROOT_ENV = "STYLEALIGN_OUTPUT_ROOT"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StyleSection(_Strict):
    gamma: float = TARGET_STYLE.gamma
    contrast_scale: float = TARGET_STYLE.contrast_scale
    blur_sigma: float = TARGET_STYLE.blur_sigma
    speckle_strength: float = TARGET_STYLE.speckle_strength
    intensity_offset: float = TARGET_STYLE.intensity_offset

    def build(self) -> StyleParams:
        return StyleParams(**self.model_dump())


class SyntheticSection(_Strict):
    train: int = Field(200, ge=1)
    val: int = Field(50, ge=1)
    target: int = Field(50, ge=1)
    image_size: int = 64
    num_landmarks: int = 4
    target_style: StyleSection = StyleSection()


class DataSection(_Strict):
    """Either ``synthetic`` or all three paths."""

    synthetic: Optional[SyntheticSection] = None
    source_train: Optional[Path] = None
    source_val: Optional[Path] = None
    target_eval: Optional[Path] = None

    @model_validator(mode="after")
    def _one_source(self):
        paths = [self.source_train, self.source_val, self.target_eval]
        if self.synthetic is None and any(p is None for p in paths):
            raise ValueError("give data.synthetic or all of source_train, source_val, target_eval")
        if self.synthetic is not None and any(p is not None for p in paths):
            raise ValueError("data.synthetic and dataset paths are mutually exclusive")
        return self


class DiffusionSection(_Strict):
    base_epochs: int = Field(100, ge=1)
    control_epochs: int = Field(100, ge=1)
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    channels: tuple[int, ...] = (16, 32, 64)
    time_dim: int = 128
    heads: int = 4
    hint_channels: int = 16
    T: int = 1000
    ema_decay: float = Field(0.995, ge=0, lt=1)
    center_data: bool = True

    def hyper(self, stage: str) -> DiffusionHyper:
        d = self.model_dump()
        epochs = d.pop("base_epochs") if stage == "base" else d.pop("control_epochs")
        d.pop("base_epochs", None)
        d.pop("control_epochs", None)
        return DiffusionHyper(epochs=epochs, **d)


class TaskSection(_Strict):
    epochs: int = Field(40, ge=1)
    batch_size: int = 16
    lr: float = 1e-3
    w_un: float = 0.1
    lambda_reg: float = Field(0.01, ge=0)
    heatmap_sigma: float = 2.0
    peak_threshold: float = 0.3
    hourglass_channels: int = 48
    unet_channels: tuple[int, ...] = (16, 32, 64, 128)

    def hyper(self) -> TaskHyper:
        return TaskHyper(**self.model_dump())


class AlignmentSection(_Strict):
    m: int = Field(8, ge=1)
    n: int = Field(4, ge=1)
    # None: calibrate from source validation at `calibration_quantile`
    t_model: Optional[float] = Field(None, gt=0)
    t_pre: Optional[float] = Field(None, gt=0)
    ddim_steps: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)
    calibration_quantile: float = Field(0.95, gt=0, le=1)


class ProducerSection(_Strict):
    kind: Optional[Literal["threshold_mask", "noise_perturb"]] = None
    sweep_min: Optional[float] = None
    sweep_max: Optional[float] = None


class ExperimentConfig(_Strict):
    task: Literal["detection", "segmentation"] = "detection"
    seed: int
    output_root: Path = Path("runs")
    name: str = "experiment"
    data: DataSection = DataSection(synthetic=SyntheticSection())
    diffusion: DiffusionSection = DiffusionSection()
    task_model: TaskSection = TaskSection()
    alignment: AlignmentSection = AlignmentSection()
    producer: ProducerSection = ProducerSection()

    def scene_spec(self) -> SceneSpec:
        syn = self.data.synthetic or SyntheticSection()
        return SceneSpec(task=self.task, image_size=syn.image_size, num_landmarks=syn.num_landmarks,
                         speckle_seed=self.seed)

    def producer_config(self) -> ProducerConfig:
        base = ProducerConfig.for_task(self.task, self.alignment.m)
        p = self.producer
        kind = p.kind or base.kind
        if kind != base.kind and (p.sweep_min is None or p.sweep_max is None):
            raise ConfigurationError("a non-default producer kind needs sweep_min and sweep_max")
        return ProducerConfig(kind, base.sweep_min if p.sweep_min is None else p.sweep_min,
                              base.sweep_max if p.sweep_max is None else p.sweep_max, self.alignment.m)

    def alignment_config(self, t_model: float) -> AlignmentConfig:
        a = self.alignment
        t_pre = a.t_pre if a.t_pre is not None else PAPER_T_PRE[self.task]
        return AlignmentConfig(a.m, a.n, t_model, t_pre, a.ddim_steps, self.seed, a.batch_size)

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def resolved_output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_root)

    def check_paths(self) -> None:
        for name in ("source_train", "source_val", "target_eval"):
            p = getattr(self.data, name)
            if p is not None and not Path(p).exists():
                raise ConfigurationError(f"data.{name}: {p} does not exist")


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return parse_config(raw)

