"""Feature extraction (guiding stream discarded) and CMC / mAP evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist

from .model import DSAReID, ModelConfig
from .trainer import (DataError, dsap_tensor, image_tensor, load_checkpoint, load_manifest,
                      load_pair, model_config_from, part_images)

log = logging.getLogger(__name__)

FEATURE_MODES = ("mf-only", "fused")


class CheckpointMismatch(DataError):
    pass


def load_model(ckpt: dict, need_dsag: bool = False) -> DSAReID:
    """Rebuild the network from a checkpoint. MF weights are mandatory, DSAG ones optional."""
    cfg = model_config_from(ckpt)
    model = DSAReID(cfg)
    try:
        model.mf.load_state_dict(ckpt["mf"])
        if need_dsag:
            if not ckpt.get("dsag"):
                raise CheckpointMismatch("fused features need the DSAG-Stream parameters")
            model.dsag.load_state_dict(ckpt["dsag"])
            if model.fusion is not None:
                model.fusion.load_state_dict(ckpt["fusion"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointMismatch(f"checkpoint does not match its config: {e}") from e
    return model.eval()


def normalize_blocks(*blocks: torch.Tensor) -> torch.Tensor:
    return torch.cat([F.normalize(b, dim=1) for b in blocks], dim=1)


@torch.no_grad()
def extract_features(model: DSAReID, images: torch.Tensor, dsap: torch.Tensor | None = None,
                     mode: str = "mf-only", batch_size: int = 64) -> np.ndarray:
    """Per-block L2-normalized (f_G, f_L), or (z_G, z_L) in fused mode."""
    if mode not in FEATURE_MODES:
        raise ValueError(f"feature mode must be one of {FEATURE_MODES}")
    if mode == "fused" and dsap is None:
        raise ValueError("fused features need DSAP inputs")
    model.eval()
    out = []
    for s in range(0, len(images), batch_size):
        x = images[s:s + batch_size]
        if mode == "mf-only":
            b = model(x)
            blocks = [b.f_G, b.f_L]
        else:
            b = model(x, dsap[s:s + batch_size])
            blocks = [b.z_G, b.z_L]
        out.append(normalize_blocks(*[t for t in blocks if t is not None]))
    return torch.cat(out).double().numpy()


def load_inputs(entries, cfg: ModelConfig, with_dsap: bool):
    imgs, sets = [], []
    for e in entries:
        img, sem = load_pair(e, cfg.input_size)
        imgs.append(img)
        if with_dsap:
            sets.append(part_images(img, sem, cfg.S, cfg.mode))
    return image_tensor(imgs), (dsap_tensor(sets) if with_dsap else None)


def pairwise_distance(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Q.ndim != 2 or G.ndim != 2 or Q.shape[1] != G.shape[1]:
        raise ValueError(f"feature length mismatch: {Q.shape} vs {G.shape}")
    return cdist(Q, G, "euclidean")


@dataclass
class RetrievalResult:
    dist: np.ndarray
    ap: np.ndarray  # NaN for skipped queries
    cmc: dict[int, float]
    mAP: float
    valid_queries: int
    skipped_queries: int
    cmc_curve: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc": {str(r): v for r, v in self.cmc.items()},
            "valid_queries": self.valid_queries,
            "skipped_queries": self.skipped_queries,
            "ap": [None if np.isnan(a) else float(a) for a in self.ap],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self, name: str = "model") -> str:
        cols = ["mAP"] + [f"Rank-{r}" for r in self.cmc]
        vals = [self.mAP] + list(self.cmc.values())
        head = f"| {'Model':<20} | " + " | ".join(f"{c:>7}" for c in cols) + " |"
        sep = "|" + "-" * 22 + "|" + "|".join("-" * 9 for _ in cols) + "|"
        row = f"| {name:<20} | " + " | ".join(f"{100 * v:7.1f}" for v in vals) + " |"
        return "\n".join([head, sep, row])


def evaluate(dist, q_ids, q_cams, g_ids, g_cams, ranks=(1, 5, 10)) -> RetrievalResult:
    """Single-query CMC and mAP with same-identity same-camera gallery entries excluded.

    Distance ties keep gallery order (stable sort). Queries without any valid
    positive are skipped and counted.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    nq, ng = dist.shape
    if (len(q_ids), len(q_cams)) != (nq, nq) or (len(g_ids), len(g_cams)) != (ng, ng):
        raise ValueError("distance matrix and id/camera arrays disagree in size")
    max_rank = max(max(ranks), 1)
    curve = np.zeros(max(ng, max_rank))
    aps = np.full(nq, np.nan)
    valid = 0
    for i in range(nq):
        keep = ~((g_ids == q_ids[i]) & (g_cams == q_cams[i]))
        if not keep.any():
            log.warning("query %d: empty gallery after filtering, skipped", i)
            continue
        order = np.argsort(dist[i][keep], kind="stable")
        hits = (g_ids[keep] == q_ids[i])[order]
        if not hits.any():
            continue
        valid += 1
        first = int(np.argmax(hits))
        curve[first:] += 1
        pos = np.flatnonzero(hits)
        # correctly rounded sums keep AP independent of summation order
        aps[i] = math.fsum((np.arange(len(pos)) + 1) / (pos + 1)) / len(pos)
    if valid:
        curve /= valid
    skipped = nq - valid
    if skipped:
        log.info("%d of %d queries had no valid positive and were skipped", skipped, nq)
    cmc = {int(r): float(curve[r - 1]) for r in ranks}
    mAP = math.fsum(aps[~np.isnan(aps)]) / valid if valid else 0.0
    return RetrievalResult(dist, aps, cmc, mAP, valid, skipped, curve)


def evaluate_checkpoint(ckpt_path, manifest, mode: str = "mf-only", ranks=(1, 5, 10),
                        drop_dsag: bool = False) -> RetrievalResult:
    """Query/gallery rows of ``manifest`` against the model in ``ckpt_path``."""
    ckpt = load_checkpoint(ckpt_path)
    if drop_dsag:
        ckpt = {k: v for k, v in ckpt.items() if k != "dsag"}
    model = load_model(ckpt, need_dsag=(mode == "fused"))
    entries = load_manifest(manifest)
    query = [e for e in entries if e.split == "query"]
    gallery = [e for e in entries if e.split == "gallery"]
    if not query or not gallery:
        raise DataError("manifest needs query and gallery rows")
    fused = mode == "fused"
    qx, qd = load_inputs(query, model.cfg, fused)
    gx, gd = load_inputs(gallery, model.cfg, fused)
    qf = extract_features(model, qx, qd, mode)
    gf = extract_features(model, gx, gd, mode)
    return evaluate(pairwise_distance(qf, gf),
                    [e.identity for e in query], [e.camera for e in query],
                    [e.identity for e in gallery], [e.camera for e in gallery], ranks)
