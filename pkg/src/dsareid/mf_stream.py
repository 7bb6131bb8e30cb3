"""Main full-image stream: backbone to feature map F, then global and part-aware heads."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import basic_stage, bottleneck_stage, conv_bn, init_weights


@dataclass
class MFConfig:
    backbone: str = "toy"  # "toy" | "resnet50"
    input_size: tuple[int, int] = (256, 128)
    width_divisor: int = 1
    groups: int = 8
    head_blocks: int = 3

    def scaled(self, c: int) -> int:
        if c % self.width_divisor:
            raise ValueError(f"width_divisor {self.width_divisor} does not divide {c}")
        return c // self.width_divisor

    @property
    def c_A(self) -> int:
        return self.scaled(1024)

    @property
    def global_dim(self) -> int:
        return self.scaled(2048)

    @property
    def local_dim(self) -> int:
        return self.scaled(2048) // self.groups

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return h // 16, w // 16

    def validate(self) -> None:
        if self.backbone not in ("toy", "resnet50"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.c_A % self.groups or self.scaled(512) % self.groups:
            raise ValueError(f"channels not divisible into {self.groups} groups")
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ValueError(f"input size {self.input_size} must be divisible by 16")


class ResNet50Trunk(nn.Module):
    """conv1 through conv4_x of ResNet-50 (total stride 16), unpretrained."""

    def __init__(self, cfg: MFConfig):
        super().__init__()
        s = cfg.scaled
        self.stem = nn.Sequential(
            nn.Conv2d(3, s(64), 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(s(64)), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = bottleneck_stage(s(64), s(64), s(256), 3, 1)
        self.layer2 = bottleneck_stage(s(256), s(128), s(512), 4, 2)
        self.layer3 = bottleneck_stage(s(512), s(256), s(1024), 6, 2)

    def forward(self, x):
        return self.layer3(self.layer2(self.layer1(self.stem(x))))


class ToyTrunk(nn.Module):
    """Four stages of basic blocks with total stride 16, same output contract."""

    def __init__(self, cfg: MFConfig):
        super().__init__()
        s = cfg.scaled
        self.stem = conv_bn(3, s(64), 3, stride=2)
        self.stages = nn.Sequential(
            basic_stage(s(64), s(64), 1, 1),
            basic_stage(s(64), s(128), 1, 2),
            basic_stage(s(128), s(256), 1, 2),
            basic_stage(s(256), s(1024), 1, 2),
        )

    def forward(self, x):
        return self.stages(F.relu(self.stem(x)))


def split_channels(F_map: torch.Tensor, n: int = 8) -> list[torch.Tensor]:
    c = F_map.shape[1]
    if c % n:
        raise ValueError(f"{c} channels not divisible into {n} groups")
    return list(F_map.split(c // n, dim=1))


class MFHeadGlobal(nn.Module):
    """conv5_x bottleneck stage with stride 1, average pooled."""

    def __init__(self, cin, width, cout, blocks=3):
        super().__init__()
        self.blocks = bottleneck_stage(cin, width, cout, blocks, stride=1)

    def forward(self, F_map):
        return self.blocks(F_map).mean(dim=(2, 3))


class MFHeadLocal(nn.Module):
    """One bottleneck stage per channel group at 1/8 width, run as a grouped stage."""

    def __init__(self, cin, width, cout, blocks=3, groups=8):
        super().__init__()
        self.groups = groups
        self.blocks = bottleneck_stage(cin, width, cout, blocks, stride=1, groups=groups)

    def forward(self, F_map):
        return self.blocks(F_map).mean(dim=(2, 3))


class MFStream(nn.Module):
    def __init__(self, cfg: MFConfig, use_global: bool = True, use_local: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = ResNet50Trunk(cfg) if cfg.backbone == "resnet50" else ToyTrunk(cfg)
        s = cfg.scaled
        self.head_global = (
            MFHeadGlobal(cfg.c_A, s(512), cfg.global_dim, cfg.head_blocks) if use_global else None
        )
        self.head_local = (
            MFHeadLocal(cfg.c_A, s(512), cfg.global_dim, cfg.head_blocks, cfg.groups)
            if use_local else None
        )
        init_weights(self)

    def backbone_forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = self.cfg.input_size
        if x.dim() != 4 or x.shape[1:] != (3, h, w):
            raise ValueError(f"expected (B, 3, {h}, {w}) images, got {tuple(x.shape)}")
        return self.backbone(x)

    def forward(self, x):
        """Returns ``(f_G, f_L)``; a missing branch yields ``None``."""
        F_map = self.backbone_forward(x)
        f_g = self.head_global(F_map) if self.head_global is not None else None
        f_l = self.head_local(F_map) if self.head_local is not None else None
        return f_g, f_l
