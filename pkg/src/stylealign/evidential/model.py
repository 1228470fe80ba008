"""Training, inference and persistence for the uncertainty-aware task models."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from ..digest import state_digest
from ..errors import CheckpointVersionError, ConfigurationError
from ..io import rle_encode
from ..synthdata import AnnotatedSample
from .nets import SegUNet, StackedHourglass, unpack_nig
from .nig import (
    NIGParams,
    evidence_regularizer,
    extract_landmarks,
    model_uncertainty_detection,
    model_uncertainty_segmentation,
    nig_nll_loss,
    task_loss_detection,
    task_loss_segmentation,
    uncertainty_map,
)

log = logging.getLogger(__name__)

FORMAT = "stylealign.task"
FORMAT_VERSION = 1


@dataclass
class TaskHyper:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    # weight of the evidential term against the task loss
    w_un: float = 0.1
    lambda_reg: float = 0.01
    heatmap_sigma: float = 2.0
    peak_threshold: float = 0.3
    hourglass_channels: int = 48
    unet_channels: tuple[int, ...] = (16, 32, 64, 128)


@dataclass
class Prediction:
    task: str
    nig: NIGParams
    umap: np.ndarray
    model_uncertainty: float
    landmarks: Optional[np.ndarray] = None
    channels: Optional[np.ndarray] = None
    heatmaps: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    prob: Optional[np.ndarray] = None

    def summary(self) -> dict:
        out = {"task": self.task, "model_uncertainty": self.model_uncertainty}
        if self.task == "detection":
            out["landmarks"] = self.landmarks.tolist()
            out["channels"] = self.channels.tolist()
        else:
            out["mask_area"] = int(self.mask.sum())
            out["mask_rle"] = rle_encode(self.mask)
        return out


def _build(task: str, arch: dict) -> torch.nn.Module:
    if task == "detection":
        return StackedHourglass(arch["num_landmarks"], arch["hourglass_channels"])
    return SegUNet(tuple(arch["unet_channels"]))


@dataclass
class TaskCheckpoint:
    task: str
    model: torch.nn.Module
    lambda_reg: float
    arch: dict
    training_meta: dict = field(default_factory=dict)

    @property
    def peak_threshold(self) -> float:
        return self.arch.get("peak_threshold", 0.3)

    def digest(self) -> str:
        return state_digest(self.model.state_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format": FORMAT, "version": FORMAT_VERSION, "task": self.task, "lambda_reg": self.lambda_reg,
                    "arch": self.arch, "training_meta": self.training_meta, "state": self.model.state_dict()}, path)
        return path

    @classmethod
    def load(cls, path) -> "TaskCheckpoint":
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        if blob.get("format") != FORMAT or blob.get("version") != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"{path}: expected {FORMAT} v{FORMAT_VERSION}, got {blob.get('format')} v{blob.get('version')}"
            )
        model = _build(blob["task"], blob["arch"])
        model.load_state_dict(blob["state"])
        model.eval()
        return cls(blob["task"], model, blob["lambda_reg"], blob["arch"], blob["training_meta"])


def gaussian_heatmaps(shape: tuple[int, int], landmarks: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """One unit-peak Gaussian heatmap per landmark, ordered as given."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    lm = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    return np.stack([np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2)) for x, y in lm]).astype(np.float32)


def _check_dataset(samples: Sequence[AnnotatedSample], task: str) -> None:
    if not samples:
        raise ConfigurationError("empty training set")
    domains = {s.domain for s in samples}
    if domains != {"source"}:
        raise ConfigurationError(f"task models train on source data only, got domains {sorted(domains)}")
    for s in samples:
        if task == "detection" and s.landmarks is None:
            raise ConfigurationError(f"{s.id}: missing landmark labels")
        if task == "segmentation" and s.mask is None:
            raise ConfigurationError(f"{s.id}: missing mask labels")
    if task == "detection" and len({len(s.landmarks) for s in samples}) != 1:
        raise ConfigurationError("detection samples must share one landmark count")


def train_task_model(samples: Sequence[AnnotatedSample], task: str, hyper: Optional[TaskHyper] = None,
                     seed: int = 0) -> TaskCheckpoint:
    hyper = hyper or TaskHyper()
    if task not in ("detection", "segmentation"):
        raise ConfigurationError(f"unknown task {task!r}")
    _check_dataset(samples, task)
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]
    shape = images.shape[-2:]
    if task == "detection":
        # landmarks sorted top-to-bottom give each heatmap channel a fixed identity
        target = np.stack([gaussian_heatmaps(shape, s.landmarks[np.lexsort((s.landmarks[:, 0], s.landmarks[:, 1]))],
                                             hyper.heatmap_sigma) for s in samples])
        arch = {"num_landmarks": int(target.shape[1]), "hourglass_channels": hyper.hourglass_channels}
    else:
        target = np.stack([s.mask for s in samples]).astype(np.float32)
        arch = {"unet_channels": list(hyper.unet_channels)}
    arch["peak_threshold"] = hyper.peak_threshold
    arch["image_size"] = int(shape[-1])
    target = torch.from_numpy(target)

    torch.manual_seed(seed)
    model = _build(task, arch)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    curves = {"task": [], "evidential": [], "lambda": []}
    n = len(samples)
    model.train()
    for epoch in range(hyper.epochs):
        # linear warm-up of the evidence regularizer
        lam = hyper.lambda_reg * (epoch + 1) / hyper.epochs
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(2)
        for start in range(0, n, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            x, y = images[idx], target[idx]
            if task == "detection":
                nig, inter = model(x)
                l_task = task_loss_detection(nig.gamma, y) + sum(task_loss_detection(p, y) for p in inter)
            else:
                nig, prob = model(x)
                nig = unpack_nig(nig)
                l_task = task_loss_segmentation(prob, y)
            l_un = nig_nll_loss(nig, y) + lam * evidence_regularizer(nig, y)
            loss = l_task + hyper.w_un * l_un
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += np.array([l_task.item(), l_un.item()]) * len(idx)
        curves["task"].append(float(sums[0] / n))
        curves["evidential"].append(float(sums[1] / n))
        curves["lambda"].append(float(lam))
        log.info("epoch %d/%d task %.5f evidential %.5f", epoch + 1, hyper.epochs, *(sums / n))
    model.eval()
    meta = {"hyper": asdict(hyper), "seed": seed, "loss_curves": curves, "num_samples": n,
            "loss_combination": "task + w_un * (nll + lambda * reg)"}
    return TaskCheckpoint(task, model, hyper.lambda_reg, arch, meta)


@torch.no_grad()
def predict_batch(ckpt: TaskCheckpoint, images: Union[np.ndarray, Sequence[np.ndarray]], batch_size: int = 32) -> list[Prediction]:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    size = ckpt.arch.get("image_size")
    if size is not None and arr.shape[-2:] != (size, size):
        raise ValueError(f"image shape {arr.shape[-2:]} != model input {(size, size)}")
    ckpt.model.eval()
    out: list[Prediction] = []
    for start in range(0, len(arr), batch_size):
        x = torch.from_numpy(arr[start:start + batch_size])[:, None]
        if ckpt.task == "detection":
            nig, _ = ckpt.model(x)
            probs = None
        else:
            nig, probs = ckpt.model(x)
            nig = unpack_nig(nig)
        nig = nig.numpy()
        umaps = uncertainty_map(nig)
        for i in range(x.shape[0]):
            params = nig[i]
            umap = umaps[i]
            if ckpt.task == "detection":
                coords, chans = extract_landmarks(params.gamma, ckpt.peak_threshold)
                out.append(Prediction("detection", params, umap, model_uncertainty_detection(umap, coords, chans),
                                      landmarks=coords, channels=chans, heatmaps=params.gamma))
            else:
                prob = probs[i].numpy()
                mask = (prob >= 0.5).astype(np.uint8)
                out.append(Prediction("segmentation", params, umap, model_uncertainty_segmentation(umap, mask),
                                      mask=mask, prob=prob))
    return out


def predict(ckpt: TaskCheckpoint, image: np.ndarray) -> Prediction:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("predict expects a single (H, W) image")
    return predict_batch(ckpt, image[None])[0]
