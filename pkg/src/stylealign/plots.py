"""Static figures: metric bars, scatter with Bland-Altman, alignment overlays."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def metric_bars(rows: Sequence[dict], task: str, path) -> Path:
    keys = ["accuracy", "recall", "f1"] if task == "detection" else ["dice", "iou"]
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(keys), 3.2))
    width = 0.8 / len(rows)
    x = np.arange(len(keys))
    for i, row in enumerate(rows):
        vals = [row.get(k) or 0.0 for k in keys]
        ax.bar(x + i * width, vals, width, label=row["method"])
    ax.set_xticks(x + width * (len(rows) - 1) / 2, keys)
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.legend(fontsize=8)
    return _save(fig, path)


def agreement_plot(measured: Sequence[float], reference: Sequence[float], quantity: str, path) -> Path:
    a = np.asarray(measured, dtype=float)
    b = np.asarray(reference, dtype=float)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.4))
    ax1.scatter(b, a, s=14)
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    ax1.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax1.set_xlabel(f"reference {quantity}")
    ax1.set_ylabel(f"measured {quantity}")
    mean, diff = (a + b) / 2, a - b
    bias, sd = diff.mean(), diff.std(ddof=1)
    ax2.scatter(mean, diff, s=14)
    for y, style in ((bias, "-"), (bias - 1.96 * sd, "--"), (bias + 1.96 * sd, "--")):
        ax2.axhline(y, color="k", ls=style, lw=0.8)
    ax2.set_xlabel("mean of pair")
    ax2.set_ylabel("difference")
    return _save(fig, path)


def alignment_overlay(result, sample, path) -> Path:
    """Target, then per condition: condition image and first aligned sample with its prediction."""
    m = len(result.conditions)
    fig, axes = plt.subplots(2, m + 1, figsize=(1.6 * (m + 1), 3.4))
    axes = np.asarray(axes).reshape(2, m + 1)
    axes[0, 0].imshow(sample.image, cmap="gray", vmin=0, vmax=1)
    axes[0, 0].set_title("target", fontsize=7)
    if result.final_prediction is not None:
        axes[1, 0].imshow(sample.image, cmap="gray", vmin=0, vmax=1)
        _draw_prediction(axes[1, 0], result.final_prediction)
        axes[1, 0].set_title("final", fontsize=7)
    for i in range(m):
        axes[0, i + 1].imshow(result.conditions[i].grid, cmap="gray", vmin=0, vmax=1)
        tag = "*" if i == result.selected_condition else ""
        axes[0, i + 1].set_title(f"c{i}{tag} pre={result.u_pre[i]:.2g}", fontsize=6)
        axes[1, i + 1].imshow(result.aligned[i, 0], cmap="gray", vmin=0, vmax=1)
        _draw_prediction(axes[1, i + 1], result.predictions[i][0])
    for ax in axes.ravel():
        ax.axis("off")
    return _save(fig, path)


def _draw_prediction(ax, pred) -> None:
    if pred.landmarks is not None and len(pred.landmarks):
        ax.scatter(pred.landmarks[:, 0], pred.landmarks[:, 1], s=8, c="r")
    elif pred.mask is not None:
        ax.contour(pred.mask, levels=[0.5], colors="r", linewidths=0.6)
