"""Two-stage training, DDIM sampling and checkpoint persistence."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..digest import state_digest
from ..errors import CheckpointVersionError, ConfigurationError
from .nets import ControlledUNet, UNet
from .schedule import DiffusionSchedule, q_sample

log = logging.getLogger(__name__)

FORMAT = "stylealign.diffusion"
FORMAT_VERSION = 1


@dataclass
class DiffusionHyper:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "AdamW"
    channels: tuple[int, ...] = (16, 32, 64)
    time_dim: int = 128
    heads: int = 4
    hint_channels: int = 16
    # exponential moving average of the trained weights; 0 disables it
    ema_decay: float = 0.995
    # subtract the mean training pixel before scaling, so noise-space zero is the typical intensity
    center_data: bool = True
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @classmethod
    def paper_scale(cls) -> "DiffusionHyper":
        # settings of the clinical-scale runs; the base stage used 400 epochs,
        # the control stage 100, at 256x256 with 50 DDIM steps
        return cls(epochs=400, batch_size=16, lr=1e-4, weight_decay=0.01, optimizer="AdamW")

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.beta_start, self.beta_end)


PAPER_SCALE = {"base_epochs": 400, "control_epochs": 100, "lr": 1e-4, "optimizer": "AdamW", "batch_size": 16,
               "image_size": 256, "ddim_steps": 50}


@dataclass
class DiffusionCheckpoint:
    stage: str
    model: Union[UNet, ControlledUNet]
    schedule: DiffusionSchedule
    image_size: int
    arch: dict
    training_meta: dict = field(default_factory=dict)

    @property
    def base(self) -> UNet:
        return self.model.base if isinstance(self.model, ControlledUNet) else self.model

    @property
    def data_shift(self) -> float:
        return float(self.arch.get("data_shift", 0.5))

    def digest(self) -> str:
        return state_digest(self.model.state_dict())

    def base_digest(self) -> str:
        return state_digest(self.base.state_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": FORMAT,
                "version": FORMAT_VERSION,
                "stage": self.stage,
                "schedule": self.schedule.to_dict(),
                "image_size": self.image_size,
                "arch": self.arch,
                "training_meta": self.training_meta,
                "state": self.model.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path) -> "DiffusionCheckpoint":
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        if blob.get("format") != FORMAT or blob.get("version") != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"{path}: expected {FORMAT} v{FORMAT_VERSION}, got {blob.get('format')} v{blob.get('version')}"
            )
        arch = blob["arch"]
        base = UNet(tuple(arch["channels"]), arch["time_dim"], arch["heads"])
        model = ControlledUNet(base, arch["hint_channels"]) if blob["stage"] == "controlled" else base
        model.load_state_dict(blob["state"])
        model.eval()
        return cls(blob["stage"], model, DiffusionSchedule(**blob["schedule"]), blob["image_size"], arch,
                   blob["training_meta"])


def _as_batch(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr[:, None].copy())


def to_model_space(images: torch.Tensor, shift: float) -> torch.Tensor:
    return (images - shift) * 2.0


def from_model_space(x: torch.Tensor, shift: float) -> torch.Tensor:
    return x / 2.0 + shift


def _run_epochs(model, params, x0, cond, hyper: DiffusionHyper, schedule: DiffusionSchedule, seed: int,
                shift: float) -> list[float]:
    gen = torch.Generator().manual_seed(seed)
    ema = [p.detach().clone() for p in params] if hyper.ema_decay > 0 else None
    abar = schedule.alpha_bar_tensor()
    opt = torch.optim.AdamW(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
    n = x0.shape[0]
    losses = []
    model.train()
    for epoch in range(hyper.epochs):
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            xb = to_model_space(x0[idx], shift)
            t = torch.randint(0, schedule.T, (len(idx),), generator=gen)
            noise = torch.randn(xb.shape, generator=gen)
            xt = q_sample(xb, t, noise, abar)
            pred = model(xt, t, None if cond is None else cond[idx])
            loss = F.mse_loss(pred, noise)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if ema is not None:
                with torch.no_grad():
                    for e, p in zip(ema, params):
                        e.lerp_(p, 1.0 - hyper.ema_decay)
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.info("epoch %d/%d loss %.5f", epoch + 1, hyper.epochs, losses[-1])
    if ema is not None:
        with torch.no_grad():
            for p, e in zip(params, ema):
                p.copy_(e)
    model.eval()
    return losses


def _arch(hyper: DiffusionHyper) -> dict:
    return {"channels": list(hyper.channels), "time_dim": hyper.time_dim, "heads": hyper.heads,
            "hint_channels": hyper.hint_channels}


def train_base(images, hyper: Optional[DiffusionHyper] = None, seed: int = 0) -> DiffusionCheckpoint:
    """Fit the unconditional noise predictor on source images (N, H, W) in [0, 1]."""
    hyper = hyper or DiffusionHyper()
    x0 = _as_batch(images) if len(images) else None
    if x0 is None or x0.shape[0] == 0:
        raise ConfigurationError("empty training set")
    size = x0.shape[-1]
    if x0.shape[-2] != size or size % (2 ** (len(hyper.channels) - 1)):
        raise ConfigurationError(f"image shape {tuple(x0.shape[-2:])} unsupported by {len(hyper.channels)} levels")
    schedule = hyper.schedule()
    torch.manual_seed(seed)
    model = UNet(hyper.channels, hyper.time_dim, hyper.heads)
    arch = _arch(hyper)
    arch["data_shift"] = float(x0.mean()) if hyper.center_data else 0.5
    losses = _run_epochs(model, list(model.parameters()), x0, None, hyper, schedule, seed, arch["data_shift"])
    meta = {"hyper": asdict(hyper), "seed": seed, "loss_curve": losses, "num_images": int(x0.shape[0])}
    return DiffusionCheckpoint("base", model, schedule, size, arch, meta)


def init_control(base: DiffusionCheckpoint, seed: int = 0) -> DiffusionCheckpoint:
    """Attach an untrained control branch; sampling is then identical to ``base``."""
    if base.stage != "base":
        raise ValueError("control branch must be attached to a base checkpoint")
    torch.manual_seed(seed)
    model = ControlledUNet(copy.deepcopy(base.model), base.arch["hint_channels"])
    model.eval()
    meta = {"base_digest": base.digest(), "base_meta": base.training_meta, "loss_curve": []}
    return DiffusionCheckpoint("controlled", model, base.schedule, base.image_size, dict(base.arch), meta)


def train_control(
    images, conditions, base: DiffusionCheckpoint, hyper: Optional[DiffusionHyper] = None, seed: int = 0
) -> DiffusionCheckpoint:
    """Train only the control branch on (image, condition) pairs; the base stays locked."""
    hyper = hyper or DiffusionHyper()
    x0 = _as_batch(images)
    cond = _as_batch(conditions)
    if x0.shape != cond.shape:
        raise ValueError(f"condition shape {tuple(cond.shape)} != image shape {tuple(x0.shape)}")
    if x0.shape[-1] != base.image_size:
        raise ValueError(f"images are {x0.shape[-1]} px, model expects {base.image_size}")
    ckpt = init_control(base, seed)
    model = ckpt.model
    before = state_digest(model.base.state_dict())
    params = [p for p in model.control.parameters() if p.requires_grad]
    losses = _run_epochs(model, params, x0, cond, hyper, base.schedule, seed, ckpt.data_shift)
    if state_digest(model.base.state_dict()) != before:
        raise RuntimeError("locked base weights changed during control training")
    ckpt.training_meta.update({"hyper": asdict(hyper), "seed": seed, "loss_curve": losses,
                               "num_pairs": int(x0.shape[0])})
    return ckpt


@torch.no_grad()
def ddim_sample_batch(
    ckpt: DiffusionCheckpoint,
    conditions: Optional[Sequence[np.ndarray]],
    steps: int = 50,
    seeds: Sequence[int] = (0,),
) -> np.ndarray:
    """Deterministic DDIM (eta = 0); one initial-noise stream per seed.

    Returns an (len(seeds), H, W) float32 array in [0, 1].
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    controlled = ckpt.stage == "controlled"
    if controlled and conditions is None:
        raise ValueError("a controlled checkpoint needs a condition image")
    if not controlled and conditions is not None:
        raise ValueError("a base checkpoint takes no condition image")
    size = ckpt.image_size
    cond = None
    if controlled:
        cond = _as_batch(conditions)
        if cond.shape[0] != len(seeds):
            raise ValueError("need one condition per seed")
        if tuple(cond.shape[-2:]) != (size, size):
            raise ValueError(f"condition is {tuple(cond.shape[-2:])}, model expects {(size, size)}")
    x = torch.cat([torch.randn((1, 1, size, size), generator=torch.Generator().manual_seed(int(s))) for s in seeds])
    abar = ckpt.schedule.alpha_bar_tensor(torch.float64)
    shift = ckpt.data_shift
    lo, hi = -2.0 * shift, 2.0 * (1.0 - shift)
    ts = ckpt.schedule.ddim_timesteps(steps)
    model = ckpt.model
    model.eval()
    for i, t in enumerate(ts):
        tt = torch.full((x.shape[0],), int(t), dtype=torch.long)
        eps = model(x, tt, cond)
        a_t = float(abar[t])
        a_prev = float(abar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        x0 = ((x - (1.0 - a_t) ** 0.5 * eps) / a_t ** 0.5).clamp(lo, hi)
        x = a_prev ** 0.5 * x0 + (1.0 - a_prev) ** 0.5 * eps if i + 1 < len(ts) else x0
    out = from_model_space(x[:, 0], shift).clamp(0.0, 1.0)
    return out.numpy().astype(np.float32)


def ddim_sample(ckpt: DiffusionCheckpoint, condition: Optional[np.ndarray] = None, steps: int = 50, seed: int = 0) -> np.ndarray:
    conds = None if condition is None else [condition]
    return ddim_sample_batch(ckpt, conds, steps, [seed])[0]
