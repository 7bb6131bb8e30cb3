"""Two-stream network: MF-Stream + DSAG-Stream, fused features and classifier heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .dsag_stream import DSAGConfig, DSAGStream
from .fusion import ClassifierHead, ConcatFC, FeatureBundle, fuse
from .mf_stream import MFConfig, MFStream

MODES = ("dsa", "csa")
FUSIONS = ("elem-add", "concat-fc")
BRANCHES = ("both", "global", "local")


@dataclass
class ModelConfig:
    num_classes: int = 8
    backbone: str = "toy"
    input_size: tuple[int, int] = (256, 128)
    S: int = 32
    width_divisor: int = 8
    mode: str = "dsa"
    fusion: str = "elem-add"
    branches: str = "both"
    classifier_hidden: int = 512
    classifier_bias: bool = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}, got {self.branches!r}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 identity classes")
        self.mf_config().validate()
        self.dsag_config().validate()

    def mf_config(self) -> MFConfig:
        return MFConfig(self.backbone, tuple(self.input_size), self.width_divisor)

    def dsag_config(self) -> DSAGConfig:
        return DSAGConfig(self.S, self.width_divisor)

    @property
    def use_global(self) -> bool:
        return self.branches in ("both", "global")

    @property
    def use_local(self) -> bool:
        return self.branches in ("both", "local")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


class DSAReID(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.mf = MFStream(cfg.mf_config(), cfg.use_global, cfg.use_local)
        self.dsag = DSAGStream(cfg.dsag_config(), cfg.use_global, cfg.use_local)
        mf, dg = cfg.mf_config(), cfg.dsag_config()
        if (mf.global_dim, mf.global_dim) != (dg.global_dim, 8 * dg.local_dim):
            raise ValueError("stream feature dimensions disagree")
        gdim, ldim = mf.global_dim, mf.local_dim
        head = lambda d: ClassifierHead(d, cfg.num_classes, cfg.classifier_hidden, cfg.classifier_bias)  # noqa: E731
        heads = {}
        if cfg.use_global:
            heads["f_G"] = head(gdim)
            heads["z_G"] = head(gdim)
        if cfg.use_local:
            for i in range(8):
                heads[f"f_L_{i + 1}"] = head(ldim)
            heads["z_L"] = head(8 * ldim)
        self.heads = nn.ModuleDict(heads)
        self.fusion = None
        if cfg.fusion == "concat-fc":
            self.fusion = nn.ModuleDict()
            if cfg.use_global:
                self.fusion["global"] = ConcatFC(gdim)
            if cfg.use_local:
                self.fusion["local"] = ConcatFC(8 * ldim)

    def _fuse(self, key, f, d):
        if f is None:
            return None
        if self.fusion is None:
            return fuse(f, d)
        return self.fusion[key](f, d)

    def forward(self, images: torch.Tensor, dsap: torch.Tensor | None = None) -> FeatureBundle:
        """``images`` (B, 3, H, W); ``dsap`` (B, 24, 3, S, S). Without ``dsap`` only MF features."""
        f_g, f_l = self.mf(images)
        if dsap is None:
            return FeatureBundle(f_G=f_g, f_L=f_l)
        d_g, d_l = self.dsag(dsap)
        return FeatureBundle(f_g, f_l, d_g, d_l,
                             self._fuse("global", f_g, d_g), self._fuse("local", f_l, d_l))

    def dsag_parameters(self):
        return list(self.dsag.parameters())

    def mf_parameters(self):
        return list(self.mf.parameters())
