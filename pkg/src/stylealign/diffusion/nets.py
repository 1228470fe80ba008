"""Noise-prediction U-Net and its zero-convolution control branch."""
from __future__ import annotations

import copy
import math
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
        args = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Level(nn.Module):
    """ResNet block, optional attention, optional resampling."""

    def __init__(self, cin: int, cout: int, tdim: int, attn: bool, resample: Optional[str], heads: int):
        super().__init__()
        self.res = ResBlock(cin, cout, tdim)
        self.attn = SelfAttention(cout, heads) if attn else None
        if resample == "down":
            self.resample = nn.Conv2d(cout, cout, 3, stride=2, padding=1)
        elif resample == "up":
            self.resample = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cout, cout, 3, padding=1))
        else:
            self.resample = None

    def body(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.res(x, temb)
        if self.attn is not None:
            h = self.attn(h)
        return h

    def step(self, h: torch.Tensor) -> torch.Tensor:
        return h if self.resample is None else self.resample(h)


class Middle(nn.Module):
    def __init__(self, ch: int, tdim: int, heads: int):
        super().__init__()
        self.res1 = ResBlock(ch, ch, tdim)
        self.attn = SelfAttention(ch, heads)
        self.res2 = ResBlock(ch, ch, tdim)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        return self.res2(self.attn(self.res1(x, temb)), temb)


class UNet(nn.Module):
    """Predicts the noise added to an image at step ``t``.

    Attention is used only at the lowest resolution and in the middle block.
    """

    def __init__(self, channels: Sequence[int] = (32, 64, 64), time_dim: int = 128, heads: int = 4, in_ch: int = 1):
        super().__init__()
        self.channels = tuple(channels)
        n = len(self.channels)
        self.time = nn.Sequential(
            SinusoidalEmbedding(self.channels[0]),
            nn.Linear(self.channels[0], time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.conv_in = nn.Conv2d(in_ch, self.channels[0], 3, padding=1)
        self.enc = nn.ModuleList()
        prev = self.channels[0]
        for i, ch in enumerate(self.channels):
            last = i == n - 1
            self.enc.append(Level(prev, ch, time_dim, attn=last, resample=None if last else "down", heads=heads))
            prev = ch
        self.mid = Middle(prev, time_dim, heads)
        self.dec = nn.ModuleList()
        for i in reversed(range(n)):
            ch = self.channels[i]
            self.dec.append(
                Level(prev + ch, ch, time_dim, attn=i == n - 1, resample="up" if i > 0 else None, heads=heads)
            )
            prev = ch
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, in_ch, 3, padding=1)

    def encode(self, x: torch.Tensor, t: torch.Tensor):
        temb = self.time(t)
        h = self.conv_in(x)
        skips = []
        for level in self.enc:
            h = level.body(h, temb)
            skips.append(h)
            h = level.step(h)
        return h, skips, temb

    def decode(self, h, skips, temb, residuals: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        h = self.mid(h, temb)
        if residuals is not None:
            h = h + residuals[0]
        for j, level in enumerate(self.dec):
            h = level.body(torch.cat([h, skips[-1 - j]], dim=1), temb)
            if residuals is not None:
                h = h + residuals[j + 1]
            h = level.step(h)
        return self.conv_out(F.silu(self.norm_out(h)))

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        h, skips, temb = self.encode(x, t)
        return self.decode(h, skips, temb)


def zero_conv(ch: int) -> nn.Conv2d:
    conv = nn.Conv2d(ch, ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlBranch(nn.Module):
    """Trainable copy of the middle block and decoder.

    A small conv encoder turns the condition image into hint features that
    are added to the copy's input at every resolution. Each copied block
    feeds the locked decoder through a zero-initialized 1x1 convolution.
    """

    def __init__(self, base: UNet, hint_channels: int = 32):
        super().__init__()
        chs = base.channels
        self.hint = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, hint_channels, 3, padding=1),
        )
        self.mid = copy.deepcopy(base.mid)
        self.dec = copy.deepcopy(base.dec)
        # hint projections: middle input, then each decoder level input
        in_chs = [chs[-1]] + [chs[-1]] + [chs[i + 1] for i in reversed(range(len(chs) - 1))]
        self.hint_proj = nn.ModuleList(nn.Conv2d(hint_channels, c, 1) for c in in_chs)
        out_chs = [chs[-1]] + [chs[i] for i in reversed(range(len(chs)))]
        self.zero = nn.ModuleList(zero_conv(c) for c in out_chs)

    def _hint_at(self, hint: torch.Tensor, k: int, like: torch.Tensor) -> torch.Tensor:
        if hint.shape[-2:] != like.shape[-2:]:
            hint = F.adaptive_avg_pool2d(hint, like.shape[-2:])
        return self.hint_proj[k](hint)

    def forward(self, h, skips, temb, cond: torch.Tensor) -> list[torch.Tensor]:
        hint = self.hint(cond)
        hc = self.mid(h + self._hint_at(hint, 0, h), temb)
        residuals = [self.zero[0](hc)]
        for j, level in enumerate(self.dec):
            hc = hc + self._hint_at(hint, j + 1, hc)
            hc = level.body(torch.cat([hc, skips[-1 - j]], dim=1), temb)
            residuals.append(self.zero[j + 1](hc))
            hc = level.step(hc)
        return residuals


class ControlledUNet(nn.Module):
    """Locked base U-Net steered by a control branch."""

    def __init__(self, base: UNet, hint_channels: int = 32):
        super().__init__()
        self.base = base
        self.control = ControlBranch(base, hint_channels)
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        if cond is None:
            raise ValueError("controlled model requires a condition image")
        h, skips, temb = self.base.encode(x, t)
        residuals = self.control(h, skips, temb, cond)
        return self.base.decode(h, skips, temb, residuals)
