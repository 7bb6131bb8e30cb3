"""Guiding stream over the 24 DSAP-images.

The 24 per-part branches (and later the 13 and 8 merged branches) run as one
grouped convolution each, so branch ``k`` owns channel block ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import basic_stage, conv_bn, init_weights
from .merge_topology import NUM_PARTS, level1_groups, level2_groups, merge_channel_groups

# Table-1 channel plan at full width
PAPER_CHANNELS = {"conv1": 32, "conv2": 64, "conv3": 64, "conv4": 128, "conv5_g": 2048, "conv5_l": 256}


@dataclass
class DSAGConfig:
    S: int = 32
    width_divisor: int = 1

    def channels(self, name: str) -> int:
        c = PAPER_CHANNELS[name]
        if c % self.width_divisor:
            raise ValueError(f"width_divisor {self.width_divisor} does not divide {name}={c}")
        return c // self.width_divisor

    def validate(self) -> None:
        for name in PAPER_CHANNELS:
            self.channels(name)
        if self.S % 4:
            raise ValueError(f"S must be divisible by 4, got {self.S}")

    @property
    def global_dim(self) -> int:
        return self.channels("conv5_g")

    @property
    def local_dim(self) -> int:
        return self.channels("conv5_l")


@dataclass
class PartFeatureMaps:
    D: torch.Tensor  # (B, 8*c, h, w)
    c: int

    @property
    def parts(self) -> list[torch.Tensor]:
        return list(self.D.split(self.c, dim=1))


class MBNs(nn.Module):
    def __init__(self, cfg: DSAGConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        n = NUM_PARTS
        n1, n2 = len(level1_groups()), len(level2_groups())
        c1, c2, c3, c4 = (cfg.channels(k) for k in ("conv1", "conv2", "conv3", "conv4"))
        self.c3, self.c4 = c3, c4
        self.conv1 = conv_bn(3 * n, c1 * n, 5, groups=n)
        self.conv2 = conv_bn(c1 * n, c2 * n, 3, groups=n)
        self.conv3 = basic_stage(c2 * n, c3 * n, 2, stride=2, groups=n)
        self.conv4 = basic_stage(c3 * n1, c4 * n1, 2, stride=2, groups=n1)
        self.n2 = n2

    def stages(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """All intermediate outputs, branch-stacked on channels. ``x`` is (B, 24, 3, S, S)."""
        b, n, ch, s1, s2 = x.shape
        if n != NUM_PARTS or ch != 3 or s1 != self.cfg.S or s2 != self.cfg.S:
            raise ValueError(f"expected (B, 24, 3, {self.cfg.S}, {self.cfg.S}), got {tuple(x.shape)}")
        out = {}
        # channels-last is much faster for the thin 5x5 grouped convolution on CPU
        h = x.reshape(b, n * 3, s1, s2).contiguous(memory_format=torch.channels_last)
        h = out["conv1"] = F.relu(self.conv1(h)).contiguous()
        h = out["conv2"] = F.relu(self.conv2(h))
        h = out["conv3"] = self.conv3(h)
        h = out["merge1"] = merge_channel_groups(h, level1_groups_zero(), self.c3)
        h = out["conv4"] = self.conv4(h)
        out["merge2"] = merge_channel_groups(h, level2_groups(), self.c4)
        return out

    def forward(self, x: torch.Tensor) -> PartFeatureMaps:
        return PartFeatureMaps(self.stages(x)["merge2"], self.c4)


def level1_groups_zero():
    return tuple(tuple(p - 1 for p in g) for g in level1_groups())


class GlobalHead(nn.Module):
    """conv5_g: two basic blocks then spatial average pooling."""

    def __init__(self, cin, cout):
        super().__init__()
        self.blocks = basic_stage(cin, cout, 2, stride=1)

    def forward(self, D):
        return self.blocks(D).mean(dim=(2, 3))


class LocalHead(nn.Module):
    """conv5_l: eight independent sub-branches, pooled and concatenated."""

    def __init__(self, cin_per_part, cout_per_part, parts=8):
        super().__init__()
        self.parts = parts
        self.blocks = basic_stage(cin_per_part * parts, cout_per_part * parts, 2, stride=1, groups=parts)

    def forward(self, D):
        return self.blocks(D).mean(dim=(2, 3))


class DSAGStream(nn.Module):
    def __init__(self, cfg: DSAGConfig, use_global: bool = True, use_local: bool = True):
        super().__init__()
        self.cfg = cfg
        self.mbns = MBNs(cfg)
        c4 = cfg.channels("conv4")
        n2 = len(level2_groups())
        self.head_global = GlobalHead(c4 * n2, cfg.global_dim) if use_global else None
        self.head_local = LocalHead(c4, cfg.local_dim, n2) if use_local else None
        init_weights(self)

    def forward(self, x):
        """Returns ``(d_G, d_L)``; a missing branch yields ``None``."""
        D = self.mbns(x).D
        d_g = self.head_global(D) if self.head_global is not None else None
        d_l = self.head_local(D) if self.head_local is not None else None
        return d_g, d_l
