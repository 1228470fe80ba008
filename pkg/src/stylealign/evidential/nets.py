"""Task networks with an evidential branch in the head."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .nig import NIGParams, nig_head


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class Residual(nn.Module):
    """Bottleneck residual module."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        mid = max(cout // 2, 8)
        self.body = nn.Sequential(
            _gn(cin), nn.ReLU(inplace=False), nn.Conv2d(cin, mid, 1),
            _gn(mid), nn.ReLU(inplace=False), nn.Conv2d(mid, mid, 3, padding=1),
            _gn(mid), nn.ReLU(inplace=False), nn.Conv2d(mid, cout, 1),
        )
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x) + self.skip(x)


class Hourglass(nn.Module):
    """Recursive hourglass; ``depth`` is the number of downsamplings."""

    def __init__(self, depth: int, ch: int):
        super().__init__()
        self.up = Residual(ch, ch)
        self.low1 = Residual(ch, ch)
        self.low2 = Hourglass(depth - 1, ch) if depth > 1 else Residual(ch, ch)
        self.low3 = Residual(ch, ch)
        self.depth = depth

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        up = self.up(x)
        low = self.low3(self.low2(self.low1(F.max_pool2d(x, 2))))
        return up + F.interpolate(low, size=up.shape[-2:], mode="nearest")


class StackedHourglass(nn.Module):
    """Two stacked hourglasses emitting per-landmark heatmaps.

    The second stack's head also emits the NIG parameters of every heatmap
    pixel. Heads run at full input resolution using stem features.
    """

    def __init__(self, num_landmarks: int = 4, ch: int = 48, stacks: int = 2, depth: int = 4):
        super().__init__()
        self.k = num_landmarks
        self.stem = nn.Sequential(nn.Conv2d(1, 16, 3, padding=1), _gn(16), nn.ReLU(), Residual(16, ch))
        self.pre = Residual(ch, ch)
        self.hgs = nn.ModuleList(Hourglass(depth, ch) for _ in range(stacks))
        self.feats = nn.ModuleList(nn.Sequential(Residual(ch, ch), nn.Conv2d(ch, ch, 1), _gn(ch), nn.ReLU()) for _ in range(stacks))
        self.inter = nn.ModuleList(nn.Conv2d(ch, num_landmarks, 1) for _ in range(stacks - 1))
        self.merge_feat = nn.ModuleList(nn.Conv2d(ch, ch, 1) for _ in range(stacks - 1))
        self.merge_pred = nn.ModuleList(nn.Conv2d(num_landmarks, ch, 1) for _ in range(stacks - 1))
        self.refine = nn.Sequential(nn.Conv2d(ch + ch, ch, 3, padding=1), _gn(ch), nn.ReLU())
        self.heatmap = nn.Conv2d(ch, num_landmarks, 1)
        self.evidence = nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU(), nn.Conv2d(ch, 3 * num_landmarks, 1))

    def forward(self, x: torch.Tensor):
        full = self.stem(x)
        h = self.pre(F.max_pool2d(full, 2))
        intermediates = []
        for i, hg in enumerate(self.hgs):
            f = self.feats[i](hg(h))
            if i < len(self.hgs) - 1:
                pred = self.inter[i](f)
                intermediates.append(F.interpolate(pred, size=x.shape[-2:], mode="bilinear", align_corners=False))
                h = h + self.merge_feat[i](f) + self.merge_pred[i](pred)
        f = F.interpolate(f, size=x.shape[-2:], mode="bilinear", align_corners=False)
        f = self.refine(torch.cat([f, full], dim=1))
        nig = nig_head(self.evidence(f), gamma=self.heatmap(f))
        return nig, intermediates


class _Down(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), _gn(cout), nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1), _gn(cout), nn.ReLU(),
        )

    def forward(self, x):
        return self.conv(x)


class SegUNet(nn.Module):
    """Basic U-Net with a foreground-probability head and a parallel NIG head."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        chs = tuple(channels)
        self.downs = nn.ModuleList()
        prev = 1
        for ch in chs:
            self.downs.append(_Down(prev, ch))
            prev = ch
        self.ups = nn.ModuleList()
        self.upconvs = nn.ModuleList()
        for ch in reversed(chs[:-1]):
            self.upconvs.append(nn.ConvTranspose2d(prev, ch, 2, stride=2))
            self.ups.append(_Down(2 * ch, ch))
            prev = ch
        self.logit = nn.Conv2d(prev, 1, 1)
        self.evidence = nn.Sequential(nn.Conv2d(prev, prev, 3, padding=1), nn.ReLU(), nn.Conv2d(prev, 4, 1))

    def forward(self, x: torch.Tensor):
        skips = []
        h = x
        for i, down in enumerate(self.downs):
            h = down(h)
            if i < len(self.downs) - 1:
                skips.append(h)
                h = F.max_pool2d(h, 2)
        for up, conv, skip in zip(self.upconvs, self.ups, reversed(skips)):
            h = conv(torch.cat([up(h), skip], dim=1))
        prob = torch.sigmoid(self.logit(h))[:, 0]
        nig = nig_head(self.evidence(h))
        return nig, prob


def unpack_nig(nig: NIGParams) -> NIGParams:
    """Drop the singleton channel of a single-output NIG head."""
    return NIGParams(nig.gamma[:, 0], nig.omega[:, 0], nig.alpha[:, 0], nig.beta[:, 0])
