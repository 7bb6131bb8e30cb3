"""Two-stream fusion, identity classifiers and the supervision losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_WEIGHTS = (0.5, 1.5, 1.0)  # MF ID, triplet, fused ID


def fuse(f: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    if f.shape != d.shape:
        raise ValueError(f"cannot fuse features of shape {tuple(f.shape)} and {tuple(d.shape)}")
    return f + d


class ConcatFC(nn.Module):
    """Ablation fusion: concatenate both streams, project back with one linear layer."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc = nn.Linear(2 * dim, dim)

    def forward(self, f, d):
        if f.shape != d.shape or f.shape[-1] != self.dim:
            raise ValueError(f"cannot fuse features of shape {tuple(f.shape)} and {tuple(d.shape)}")
        return self.fc(torch.cat([f, d], dim=-1))


class ClassifierHead(nn.Module):
    """FC -> ReLU -> FC; ``probabilities`` applies the softmax."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 512, bias: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, num_classes, bias=bias)
        nn.init.kaiming_normal_(self.fc1.weight, nonlinearity="relu")
        nn.init.zeros_(self.fc1.bias)
        nn.init.normal_(self.fc2.weight, std=0.001)
        if bias:
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))

    def probabilities(self, x):
        return F.softmax(self(x), dim=-1)


def smoothed_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, epsilon: float = 0.1) -> torch.Tensor:
    """Mean over the batch of -sum_k q'_k log p_k with q' = (1 - eps) onehot + eps / C."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    C = logits.shape[-1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range for {C} classes")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    uniform = -logp.mean(dim=-1)
    return ((1.0 - epsilon) * nll + epsilon * uniform).mean()


def id_loss(head: nn.Module, feature: torch.Tensor, labels, epsilon: float = 0.1) -> torch.Tensor:
    return smoothed_cross_entropy(head(feature), labels, epsilon)


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    d2 = (x[:, None, :] - x[None, :, :]).pow(2).sum(dim=-1)
    # clamp keeps sqrt differentiable at coincident points
    return d2.clamp_min(1e-12).sqrt()


def hard_mining(dist: torch.Tensor, labels: torch.Tensor):
    """Indices of the hardest positive and negative per anchor; ties go to the lowest index."""
    labels = torch.as_tensor(labels)
    same = labels[:, None] == labels[None, :]
    n = len(labels)
    pos_mask = same & ~torch.eye(n, dtype=torch.bool)
    if not pos_mask.any(dim=1).all():
        raise ValueError("every anchor needs at least one positive (K >= 2)")
    if not (~same).any(dim=1).all():
        raise ValueError("every anchor needs at least one negative (P >= 2)")
    d = dist.detach()
    pos = torch.where(pos_mask, d, torch.full_like(d, -float("inf"))).argmax(dim=1)
    neg = torch.where(~same, d, torch.full_like(d, float("inf"))).argmin(dim=1)
    return pos, neg


def triplet_batch_hard(embeddings: torch.Tensor, labels, margin: float = 0.3) -> torch.Tensor:
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    labels = torch.as_tensor(labels)
    dist = pairwise_euclidean(embeddings)
    pos, neg = hard_mining(dist, labels)
    idx = torch.arange(len(labels))
    return F.relu(margin + dist[idx, pos] - dist[idx, neg]).mean()


@dataclass
class FeatureBundle:
    f_G: torch.Tensor | None = None
    f_L: torch.Tensor | None = None
    d_G: torch.Tensor | None = None
    d_L: torch.Tensor | None = None
    z_G: torch.Tensor | None = None
    z_L: torch.Tensor | None = None
    parts: int = 8

    @property
    def f_L_parts(self) -> list[torch.Tensor]:
        return list(self.f_L.chunk(self.parts, dim=1))

    @property
    def d_L_parts(self) -> list[torch.Tensor]:
        return list(self.d_L.chunk(self.parts, dim=1))


LOSS_COLUMNS = (
    ["id_mf_global"] + [f"id_mf_part{i}" for i in range(1, 9)]
    + ["id_mf_parts", "id_mf", "id_fused_global", "id_fused_local",
       "triplet_fused_global", "triplet_fused_local", "total"]
)


@dataclass
class LossReport:
    id_mf_global: torch.Tensor
    id_mf_part: list = field(default_factory=list)
    id_mf_parts: torch.Tensor = None
    id_mf: torch.Tensor = None
    id_fused_global: torch.Tensor = None
    id_fused_local: torch.Tensor = None
    triplet_fused_global: torch.Tensor = None
    triplet_fused_local: torch.Tensor = None
    total: torch.Tensor = None

    def row(self) -> dict[str, float]:
        val = lambda t: float(t.detach())  # noqa: E731
        out = {"id_mf_global": val(self.id_mf_global)}
        for i in range(8):
            out[f"id_mf_part{i + 1}"] = val(self.id_mf_part[i]) if i < len(self.id_mf_part) else 0.0
        for k in LOSS_COLUMNS[9:]:
            out[k] = val(getattr(self, k))
        return out


def combine(id_mf_global, id_mf_part, id_fused_global, id_fused_local,
            triplet_fused_global, triplet_fused_local, weights=DEFAULT_WEIGHTS) -> LossReport:
    """Weighted total. The MF ID aggregate is the mean over f_G and the part losses present."""
    zero = torch.zeros(())
    terms = ([id_mf_global] if id_mf_global is not None else []) + list(id_mf_part)
    id_mf = torch.stack(terms).mean() if terms else zero
    id_parts = torch.stack(list(id_mf_part)).mean() if id_mf_part else zero
    g = lambda t: zero if t is None else t  # noqa: E731
    w_mf, w_tri, w_id = weights
    total = (w_mf * id_mf
             + w_tri * (g(triplet_fused_global) + g(triplet_fused_local))
             + w_id * (g(id_fused_global) + g(id_fused_local)))
    return LossReport(g(id_mf_global), list(id_mf_part), id_parts, id_mf,
                      g(id_fused_global), g(id_fused_local),
                      g(triplet_fused_global), g(triplet_fused_local), total)


def total_loss(bundle: FeatureBundle, heads: nn.ModuleDict, labels, weights=DEFAULT_WEIGHTS,
               margin: float = 0.3, epsilon: float = 0.1) -> LossReport:
    """ID loss on f_G and every f_{L,i}; ID and batch-hard triplet on z_G and z_L."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    id_g = id_loss(heads["f_G"], bundle.f_G, labels, epsilon) if bundle.f_G is not None else None
    id_parts = []
    if bundle.f_L is not None:
        id_parts = [id_loss(heads[f"f_L_{i + 1}"], f, labels, epsilon)
                    for i, f in enumerate(bundle.f_L_parts)]
    id_zg = tri_zg = id_zl = tri_zl = None
    if bundle.z_G is not None:
        id_zg = id_loss(heads["z_G"], bundle.z_G, labels, epsilon)
        tri_zg = triplet_batch_hard(bundle.z_G, labels, margin)
    if bundle.z_L is not None:
        id_zl = id_loss(heads["z_L"], bundle.z_L, labels, epsilon)
        tri_zl = triplet_batch_hard(bundle.z_L, labels, margin)
    return combine(id_g, id_parts, id_zg, id_zl, tri_zg, tri_zl, weights)
