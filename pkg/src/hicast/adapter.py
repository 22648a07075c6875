"""Plug-and-play control adapters.

Each adapter maps one control map to a pyramid of per-level feature maps that
the backbone adds to its encoder outputs. The final projection of every level
is zero-initialized, so a freshly constructed adapter is an exact no-op;
multiple adapters combine by weighted summation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ControlMap


@dataclass
class AdapterPyramid:
    levels: list[torch.Tensor]  # level k: [B, C_k, H_k, W_k]

    def __len__(self) -> int:
        return len(self.levels)


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv2(self.act(self.conv1(x)))
        return x + h


class StyleAdapter(nn.Module):
    """Control map -> multi-scale additive features.

    The map is pixel-unshuffled down to the latent resolution, then each level
    applies conv -> residual block -> zero-init projection, downsampling
    between levels to track the backbone feature shapes.
    """

    def __init__(
        self,
        kind: str,
        level_channels: tuple[int, ...] = (32, 64),
        factor: int = 4,
        map_channels: int = 1,
        seed: int | None = None,
    ):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.kind = kind
        self.factor = factor
        self.map_channels = map_channels
        self.level_channels = tuple(level_channels)
        self.unshuffle = nn.PixelUnshuffle(factor)
        cin = map_channels * factor * factor
        self.stem = nn.Conv2d(cin, level_channels[0], 3, padding=1)
        self.level_blocks = nn.ModuleList()
        self.level_proj = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = level_channels[0]
        for i, c in enumerate(self.level_channels):
            if i > 0:
                self.downs.append(nn.Conv2d(ch, c, 3, stride=2, padding=1))
                ch = c
            self.level_blocks.append(_ResBlock(ch))
            proj = nn.Conv2d(ch, c, 1)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.level_proj.append(proj)

    def forward(self, control: ControlMap | np.ndarray | torch.Tensor) -> AdapterPyramid:
        x = control.map if isinstance(control, ControlMap) else control
        if not isinstance(x, torch.Tensor):
            x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        if x.ndim == 3:
            x = x[None]
        if x.shape[1] != self.map_channels:
            raise ValueError(
                f"adapter {self.kind!r} expects {self.map_channels}-channel maps, got {x.shape[1]}"
            )
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ValueError(f"map size {tuple(x.shape[-2:])} not divisible by factor {self.factor}")
        h = self.stem(self.unshuffle(x))
        levels = []
        for i in range(len(self.level_channels)):
            if i > 0:
                h = self.downs[i - 1](h)
            h = self.level_blocks[i](h)
            levels.append(self.level_proj[i](h))
        return AdapterPyramid(levels)


def adapter_forward(control: ControlMap, adapter: StyleAdapter) -> AdapterPyramid:
    return adapter(control)


def combine(
    weighted: list[tuple[AdapterPyramid, float]],
    like: AdapterPyramid | None = None,
) -> AdapterPyramid | None:
    """Levelwise weighted sum of pyramids.

    An empty list yields a zero pyramid shaped like `like` when given,
    otherwise None (the backbone treats None as "no injection").
    """
    if not weighted:
        if like is None:
            return None
        return AdapterPyramid([torch.zeros_like(lv) for lv in like.levels])
    n_levels = len(weighted[0][0])
    for pyr, _ in weighted:
        if len(pyr) != n_levels:
            raise ValueError("pyramids have different level counts")
        for a, b in zip(pyr.levels, weighted[0][0].levels):
            if a.shape != b.shape:
                raise ValueError(f"incompatible pyramid shapes {a.shape} vs {b.shape}")
    levels = []
    for k in range(n_levels):
        acc = torch.zeros_like(weighted[0][0].levels[k])
        for pyr, wgt in weighted:
            acc = acc + float(wgt) * pyr.levels[k]
        levels.append(acc)
    return AdapterPyramid(levels)
