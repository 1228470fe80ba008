"""Normal-Inverse-Gamma evidential outputs: density, losses and uncertainty.

Losses operate on torch tensors so they can drive training and be checked
against finite differences; the density and reductions are plain numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import gammaln

Array = Union[np.ndarray, torch.Tensor]

# keeps omega, alpha strictly above 1 and beta above 0 in float32
PARAM_EPS = 1e-4


@dataclass
class NIGParams:
    gamma: Array
    omega: Array
    alpha: Array
    beta: Array

    def validate(self) -> None:
        shapes = {tuple(a.shape) for a in (self.gamma, self.omega, self.alpha, self.beta)}
        if len(shapes) != 1:
            raise ValueError(f"NIG grids disagree in shape: {shapes}")
        if not bool((self.omega > 1).all()):
            raise ValueError("omega must be > 1")
        if not bool((self.alpha > 1).all()):
            raise ValueError("alpha must be > 1")
        if not bool((self.beta > 0).all()):
            raise ValueError("beta must be > 0")

    def numpy(self) -> "NIGParams":
        conv = lambda a: a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
        return NIGParams(conv(self.gamma), conv(self.omega), conv(self.alpha), conv(self.beta))

    def __getitem__(self, idx) -> "NIGParams":
        return NIGParams(self.gamma[idx], self.omega[idx], self.alpha[idx], self.beta[idx])


def nig_head(raw: torch.Tensor, gamma: Optional[torch.Tensor] = None) -> NIGParams:
    """Map raw head output to valid parameters.

    ``raw`` stacks (gamma, omega, alpha, beta) along dim 1 in K-channel
    groups; if ``gamma`` is given, ``raw`` holds only the other three.
    """
    if gamma is None:
        gamma, raw = torch.tensor_split(raw, [raw.shape[1] // 4], dim=1)
    w, a, b = torch.chunk(raw, 3, dim=1)
    return NIGParams(
        gamma,
        1.0 + F.softplus(w) + PARAM_EPS,
        1.0 + F.softplus(a) + PARAM_EPS,
        F.softplus(b) + PARAM_EPS,
    )


def nig_log_density(mu: float, sigma2: float, gamma: float, omega: float, alpha: float, beta: float) -> float:
    """Log joint density of (mu, sigma^2) under NIG(gamma, omega, alpha, beta)."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be > 0")
    if omega <= 0 or alpha <= 0 or beta <= 0:
        raise ValueError("invalid NIG parameters")
    return (
        alpha * math.log(beta)
        + 0.5 * math.log(omega)
        - gammaln(alpha)
        - 0.5 * math.log(2 * math.pi * sigma2)
        - (alpha + 1) * math.log(sigma2)
        - (2 * beta + omega * (gamma - mu) ** 2) / (2 * sigma2)
    )


def _check_target(target: torch.Tensor) -> None:
    if not torch.isfinite(target).all():
        raise ValueError("target contains non-finite values")


def nig_nll(params: NIGParams, target: torch.Tensor) -> torch.Tensor:
    """Per-element negative log-likelihood of the evidential output."""
    g, w, a, b = params.gamma, params.omega, params.alpha, params.beta
    big_omega = 2.0 * b * (1.0 + w)
    return (
        0.5 * torch.log(math.pi / w)
        - a * torch.log(big_omega)
        + (a + 0.5) * torch.log((target - g) ** 2 * w + big_omega)
        + torch.lgamma(a)
        - torch.lgamma(a + 0.5)
    )


def nig_nll_loss(params: NIGParams, target: torch.Tensor) -> torch.Tensor:
    _check_target(target)
    return nig_nll(params, target).mean()


def evidence_regularizer(params: NIGParams, target: torch.Tensor) -> torch.Tensor:
    return ((target - params.gamma).abs() * (2.0 * params.omega + params.alpha)).mean()


def evidential_loss(params: NIGParams, target: torch.Tensor, lambda_reg: float) -> torch.Tensor:
    if lambda_reg < 0:
        raise ValueError("lambda_reg must be >= 0")
    return nig_nll_loss(params, target) + lambda_reg * evidence_regularizer(params, target)


def task_loss_detection(pred_heatmaps: torch.Tensor, gt_heatmaps: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(pred_heatmaps, gt_heatmaps)


def task_loss_segmentation(prob: torch.Tensor, mask: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Binary cross-entropy plus smoothed Dice, both averaged over the batch.

    Inputs are (B, H, W) or (H, W); the Dice sums run per image.
    """
    if prob.dim() == 2:
        prob, mask = prob[None], mask[None]
    mask = mask.to(prob.dtype)
    p = prob.clamp(eps, 1.0 - eps)
    ce = -(mask * torch.log(p) + (1.0 - mask) * torch.log(1.0 - p)).mean()
    dims = tuple(range(1, prob.dim()))
    inter = (mask * prob).sum(dims)
    dice = 1.0 - (2.0 * inter + 1.0) / (mask.sum(dims) + prob.sum(dims) + 1.0)
    return ce + dice.mean()


def uncertainty_map(params: NIGParams) -> np.ndarray:
    p = params.numpy()
    if np.any(p.alpha <= 1):
        raise ValueError("alpha must be > 1 for a finite uncertainty map")
    return p.beta / (p.omega * (p.alpha - 1.0))


def model_uncertainty_detection(umap: np.ndarray, landmarks: np.ndarray, channels: Optional[Sequence[int]] = None) -> float:
    """Mean uncertainty at the predicted landmark pixels; ``inf`` when nothing was detected.

    For a per-landmark (K, H, W) map, ``channels`` names the heatmap each
    landmark came from.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    if len(landmarks) == 0:
        return math.inf
    umap = np.asarray(umap)
    if umap.ndim == 2:
        umap = umap[None]
        channels = [0] * len(landmarks)
    elif channels is None:
        raise ValueError("channels required for a multi-channel uncertainty map")
    h, w = umap.shape[-2:]
    cols = np.clip(np.rint(landmarks[:, 0]).astype(int), 0, w - 1)
    rows = np.clip(np.rint(landmarks[:, 1]).astype(int), 0, h - 1)
    return float(umap[np.asarray(channels), rows, cols].mean())


def model_uncertainty_segmentation(umap: np.ndarray, mask: np.ndarray) -> float:
    """Mean uncertainty over the predicted foreground; ``inf`` for an empty mask."""
    fg = np.asarray(mask).astype(bool)
    if not fg.any():
        return math.inf
    return float(np.asarray(umap)[fg].sum() / fg.sum())


def extract_landmarks(heatmaps: np.ndarray, peak_threshold: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Argmax of each heatmap kept when its peak reaches ``peak_threshold``.

    Returns ((N, 2) array of (x, y) pixels, (N,) source channel indices).
    """
    heatmaps = np.asarray(heatmaps)
    if heatmaps.ndim == 2:
        heatmaps = heatmaps[None]
    coords, chans = [], []
    for k, hm in enumerate(heatmaps):
        flat = int(np.argmax(hm))
        row, col = divmod(flat, hm.shape[1])
        if hm[row, col] >= peak_threshold:
            coords.append((float(col), float(row)))
            chans.append(k)
    return np.asarray(coords, dtype=np.float64).reshape(-1, 2), np.asarray(chans, dtype=np.int64)
