"""Synthetic identities rendered with exact ground-truth dense semantics.

An identity is a set of 24 UV texture atlases. A render places each visible
part as an affine quadrilateral in the image and samples the atlas at the
pixel's (8-bit quantized) UV coordinate, so every foreground pixel carries
exactly the atlas texel its semantics point to.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from .merge_topology import BACK_PARTS, FRONT_PARTS, NUM_PARTS
from .semantics_warp import DenseSemanticsMap, encode_iuv, write_png


class ParameterError(ValueError):
    pass


@dataclass
class IdentityAtlas:
    textures: np.ndarray  # (24, T, T, 3) uint8

    @property
    def size(self) -> int:
        return self.textures.shape[1]


@dataclass
class RenderParams:
    """Per-part placement rows are (center_y, center_x, height, width, angle) in pixels/radians."""

    visible: np.ndarray  # (24,) bool
    placement: np.ndarray  # (24, 5) float
    occluders: list = field(default_factory=list)  # (y0, x0, y1, x1, (r, g, b))
    background_seed: int = 0

    def validate(self) -> None:
        if self.visible.shape != (NUM_PARTS,) or self.placement.shape != (NUM_PARTS, 5):
            raise ParameterError("RenderParams needs 24 visibility flags and 24 placements")
        if not self.visible.any():
            raise ParameterError("at least one part must be visible")
        hw = self.placement[self.visible][:, 2:4]
        if np.any(hw <= 0) or not np.all(np.isfinite(self.placement)):
            raise ParameterError("degenerate part placement (zero or negative scale)")


# frontal-view layout (person's right on the image left), normalized (cy, cx, h, w)
_LAYOUT = {
    2: (0.33, 0.50, 0.30, 0.36),
    23: (0.10, 0.44, 0.14, 0.12), 24: (0.10, 0.56, 0.14, 0.12),
    16: (0.30, 0.24, 0.20, 0.11), 15: (0.30, 0.76, 0.20, 0.11),
    20: (0.49, 0.22, 0.18, 0.10), 19: (0.49, 0.78, 0.18, 0.10),
    3: (0.62, 0.21, 0.07, 0.09), 4: (0.62, 0.79, 0.07, 0.09),
    9: (0.59, 0.41, 0.20, 0.15), 10: (0.59, 0.59, 0.20, 0.15),
    13: (0.79, 0.41, 0.18, 0.13), 14: (0.79, 0.59, 0.18, 0.13),
    6: (0.94, 0.40, 0.06, 0.14), 5: (0.94, 0.60, 0.06, 0.14),
}
# back parts sit where their front counterparts do
_BACK_OF = {1: 2, 7: 9, 8: 10, 11: 13, 12: 14, 17: 15, 18: 16, 21: 19, 22: 20}
for _b, _f in _BACK_OF.items():
    _LAYOUT[_b] = _LAYOUT[_f]

# torso first, head last
DRAW_ORDER = (1, 2, 7, 8, 9, 10, 11, 12, 13, 14, 5, 6, 17, 18, 15, 16,
              21, 22, 19, 20, 3, 4, 23, 24)


def _smooth_field(rng: np.random.Generator, shape, n_waves: int, amp: float, max_freq: float):
    """Sum of random planar sinusoids over the unit square, one field per channel."""
    h, w = shape
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    out = np.zeros((h, w, 3))
    for ch in range(3):
        for _ in range(n_waves):
            fy, fx = rng.uniform(-max_freq, max_freq, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            out[..., ch] += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out


# garment each part belongs to; parts of one garment share a base colour
_GARMENT = {1: "upper", 2: "upper", 15: "upper", 16: "upper", 17: "upper", 18: "upper",
            19: "upper", 20: "upper", 21: "upper", 22: "upper",
            7: "lower", 8: "lower", 9: "lower", 10: "lower",
            11: "lower", 12: "lower", 13: "lower", 14: "lower",
            3: "skin", 4: "skin", 23: "skin", 24: "skin", 5: "shoes", 6: "shoes"}


def make_identity(seed: int, T: int = 32) -> IdentityAtlas:
    """Garment colours plus a smooth per-part pattern.

    Upper-garment hues follow a golden-ratio sequence in ``seed`` so that
    nearby seeds get well separated colours.
    """
    if T < 8:
        raise ParameterError(f"atlas size T must be >= 8, got {T}")
    rng = np.random.default_rng([seed, 7919])
    hue = (seed * 0.6180339887 + rng.uniform(0, 0.05)) % 1.0
    bases = {
        "upper": 255 * np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 0.85), rng.uniform(0.65, 0.95))),
        "lower": 255 * np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.9))),
        "skin": 255 * np.array(colorsys.hsv_to_rgb(rng.uniform(0.02, 0.1), rng.uniform(0.25, 0.6), rng.uniform(0.45, 0.95))),
        "shoes": 255 * np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0, 0.6), rng.uniform(0.1, 0.6))),
    }
    tex = np.empty((NUM_PARTS, T, T, 3), dtype=np.uint8)
    for p in range(1, NUM_PARTS + 1):
        offset = rng.uniform(-12, 12, size=3)
        field_ = _smooth_field(rng, (T, T), n_waves=3, amp=14.0, max_freq=2.5)
        tex[p - 1] = np.clip(np.rint(bases[_GARMENT[p]] + offset + field_), 0, 255).astype(np.uint8)
    return IdentityAtlas(tex)


def random_params(rng: np.random.Generator, H: int, W: int, view: str | None = None,
                  occluder_prob: float = 0.2, jitter: float = 1.0) -> RenderParams:
    """Random pose/viewpoint: frontal views hide back parts, back views hide front parts."""
    if view is None:
        view = "front" if rng.random() < 0.5 else "back"
    hidden = BACK_PARTS if view == "front" else FRONT_PARTS
    visible = np.array([p not in hidden for p in range(1, NUM_PARTS + 1)])
    gscale = 1.0 + jitter * rng.uniform(-0.08, 0.08)
    gdy, gdx = jitter * rng.uniform(-0.04, 0.04, size=2)
    place = np.zeros((NUM_PARTS, 5))
    for p in range(1, NUM_PARTS + 1):
        cy, cx, h, w = _LAYOUT[p]
        if view == "back":
            cx = 1.0 - cx
        cy = 0.5 + (cy - 0.5) * gscale + gdy + jitter * rng.uniform(-0.02, 0.02)
        cx = 0.5 + (cx - 0.5) * gscale + gdx + jitter * rng.uniform(-0.03, 0.03)
        s = gscale * (1.0 + jitter * rng.uniform(-0.12, 0.12))
        ang = jitter * rng.uniform(-0.25, 0.25)
        place[p - 1] = (cy * H, cx * W, h * H * s, w * W * s, ang)
    occluders = []
    if rng.random() < occluder_prob:
        oh = int(rng.integers(H // 8, H // 3))
        ow = int(rng.integers(W // 4, W // 2 + 1))
        y0 = int(rng.integers(0, H - oh))
        x0 = int(rng.integers(0, W - ow))
        occluders.append((y0, x0, y0 + oh, x0 + ow, tuple(int(c) for c in rng.integers(0, 256, 3))))
    return RenderParams(visible, place, occluders, int(rng.integers(0, 2**31 - 1)))


def render(atlas: IdentityAtlas, params: RenderParams, H: int, W: int):
    """Render an identity; returns ``(image uint8 HxWx3, DenseSemanticsMap)``."""
    params.validate()
    T = atlas.size
    bg_rng = np.random.default_rng(params.background_seed)
    bg = _smooth_field(bg_rng, (H, W), n_waves=2, amp=12.0, max_freq=1.5)
    gray = bg_rng.uniform(70, 170) + bg_rng.uniform(-12, 12, size=3)
    img = np.clip(np.rint(gray + bg), 0, 255).astype(np.uint8)
    part = np.zeros((H, W), dtype=np.int64)
    u = np.zeros((H, W))
    v = np.zeros((H, W))
    py, px = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    for p in DRAW_ORDER:
        if not params.visible[p - 1]:
            continue
        cy, cx, h, w, ang = params.placement[p - 1]
        dy, dx = py - cy, px - cx
        ca, sa = math.cos(ang), math.sin(ang)
        # inverse rotation, then unit square: rows <- u, cols <- v
        uu = (ca * dy + sa * dx) / h + 0.5
        vv = (-sa * dy + ca * dx) / w + 0.5
        inside = (uu >= 0) & (uu < 1) & (vv >= 0) & (vv < 1)
        if not inside.any():
            continue
        uq = np.rint(uu[inside] * 255) / 255.0
        vq = np.rint(vv[inside] * 255) / 255.0
        tr = np.minimum(np.floor(uq * T).astype(np.int64), T - 1)
        tc = np.minimum(np.floor(vq * T).astype(np.int64), T - 1)
        img[inside] = atlas.textures[p - 1, tr, tc]
        part[inside] = p
        u[inside] = uq
        v[inside] = vq
    for y0, x0, y1, x1, color in params.occluders:
        img[y0:y1, x0:x1] = color
        part[y0:y1, x0:x1] = 0
    u[part == 0] = 0.0
    v[part == 0] = 0.0
    return img, DenseSemanticsMap(part, u, v)


def perturb_semantics(sem: DenseSemanticsMap, drop_prob: float, uv_sigma: float,
                      rng: np.random.Generator, truncate: float = 3.0) -> DenseSemanticsMap:
    """Simulate estimator errors: whole-part misses and UV jitter (truncated Gaussian)."""
    if not 0.0 <= drop_prob <= 1.0:
        raise ParameterError(f"drop probability must be in [0, 1], got {drop_prob}")
    if uv_sigma < 0:
        raise ParameterError(f"uv jitter sigma must be >= 0, got {uv_sigma}")
    out = sem.copy()
    present = np.unique(out.part_index[out.part_index > 0])
    dropped = present[rng.random(present.size) < drop_prob]
    out.part_index[np.isin(out.part_index, dropped)] = 0
    fg = out.part_index > 0
    n = int(fg.sum())
    if uv_sigma > 0 and n:
        noise = truncnorm.rvs(-truncate, truncate, scale=uv_sigma, size=(2, n), random_state=rng)
        out.u[fg] = np.clip(out.u[fg] + noise[0], 0.0, 1.0)
        out.v[fg] = np.clip(out.v[fg] + noise[1], 0.0, 1.0)
    out.u[~fg] = 0.0
    out.v[~fg] = 0.0
    return out


def split_assignments(num_ids: int, renders: int, rule: str) -> list[list[str]]:
    """Split label per (identity, render).

    ``holdout:N``  every identity trains on its first renders; of the last N,
                   the first is a query and the rest gallery.
    ``disjoint:N`` the last N identities are test identities (1 query + rest
                   gallery); the others train on all renders.
    """
    kind, _, arg = rule.partition(":")
    try:
        n = int(arg)
    except ValueError:
        raise ParameterError(f"bad split rule {rule!r}") from None
    out = []
    if kind == "holdout":
        if not 2 <= n < renders:
            raise ParameterError(f"holdout needs 2 <= N < renders, got {n}")
        for _ in range(num_ids):
            out.append(["train"] * (renders - n) + ["query"] + ["gallery"] * (n - 1))
    elif kind == "disjoint":
        if not 1 <= n < num_ids:
            raise ParameterError(f"disjoint needs 1 <= N < identities, got {n}")
        for i in range(num_ids):
            if i < num_ids - n:
                out.append(["train"] * renders)
            else:
                out.append(["query"] + ["gallery"] * (renders - 1))
    else:
        raise ParameterError(f"unknown split rule {rule!r}")
    return out


def make_dataset(out_dir, num_ids: int = 8, renders: int = 8, cameras: int = 2,
                 split: str = "holdout:2", seed: int = 0, H: int = 128, W: int = 64,
                 T: int = 32, occluder_prob: float = 0.2, drop_prob: float = 0.0,
                 uv_sigma: float = 0.0) -> dict:
    """Render a dataset to ``out_dir`` and write ``manifest.json``; returns the manifest."""
    if renders < 2:
        raise ParameterError("need at least 2 renders per identity")
    if cameras < 1:
        raise ParameterError("need at least one camera")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "iuv").mkdir(parents=True, exist_ok=True)
    splits = split_assignments(num_ids, renders, split)
    entries = []
    for i in range(num_ids):
        atlas = make_identity(seed * 100003 + i, T)
        for r in range(renders):
            rng = np.random.default_rng([seed, i, r])
            params = random_params(rng, H, W, occluder_prob=occluder_prob)
            img, sem = render(atlas, params, H, W)
            if drop_prob > 0 or uv_sigma > 0:
                sem = perturb_semantics(sem, drop_prob, uv_sigma, rng)
            name = f"{i:04d}_{r:02d}.png"
            write_png(out_dir / "images" / name, img)
            write_png(out_dir / "iuv" / name, encode_iuv(sem))
            entries.append({
                "image": f"images/{name}",
                "iuv": f"iuv/{name}",
                "identity": i,
                "camera": r % cameras,
                "split": splits[i][r],
            })
    manifest = {"version": 1, "height": H, "width": W, "entries": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
