from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn


class FeatureSequence(NamedTuple):
    global_: torch.Tensor  # (B, T, d)
    local: torch.Tensor  # (B, T, D, h, w)


def _conv(cin, cout, stride):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class Backbone(nn.Module):
    """Small strided CNN: stride-4 local maps and a global vector per frame.

    ``global_pool="mean"`` averages the last stage over space before projecting;
    ``"flatten"`` projects the whole stride-16 map, which keeps where each limb
    is. Frames never interact, so the output for a frame depends only on that frame.
    """

    def __init__(self, resolution=64, width=16, global_dim=128, local_dim=32, in_channels=3,
                 global_pool="flatten"):
        super().__init__()
        if global_pool not in ("mean", "flatten"):
            raise ValueError(f"unknown global_pool {global_pool!r}")
        self.resolution = resolution
        self.global_pool = global_pool
        self.stage1 = _conv(in_channels, width, 2)
        self.stage2a = _conv(width, 2 * width, 2)
        self.stage2b = _conv(2 * width, 2 * width, 1)
        self.stage3 = _conv(2 * width, 4 * width, 2)
        self.stage4 = _conv(4 * width, 8 * width, 2)
        self.local_proj = nn.Conv2d(2 * width, local_dim, 1)
        cells = 1 if global_pool == "mean" else (-(-resolution // 16)) ** 2
        self.global_proj = nn.Linear(8 * width * cells, global_dim)

    def forward(self, images: torch.Tensor) -> FeatureSequence:
        lead = images.shape[:-3]
        c, h, w = images.shape[-3:]
        if h != self.resolution or w != self.resolution:
            raise ValueError(f"expected {self.resolution}x{self.resolution} frames, got {h}x{w}")
        x = images.reshape(-1, c, h, w)
        x = torch.relu(self.stage1(x))
        x = torch.relu(self.stage2a(x))
        x = torch.relu(self.stage2b(x))
        local = self.local_proj(x)
        x = torch.relu(self.stage3(x))
        x = torch.relu(self.stage4(x))
        glob = self.global_proj(x.mean(dim=(2, 3)) if self.global_pool == "mean" else x.flatten(1))
        return FeatureSequence(glob.reshape(lead + glob.shape[1:]), local.reshape(lead + local.shape[1:]))
