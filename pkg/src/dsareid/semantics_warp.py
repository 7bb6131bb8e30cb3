"""Dense-semantics decoding and warping of person images into UV-space part images."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .merge_topology import NUM_PARTS


class DecodeError(ValueError):
    pass


@dataclass
class DenseSemanticsMap:
    """Per-pixel part index (0 = background) with (u, v) surface coordinates."""

    part_index: np.ndarray  # (H, W) int
    u: np.ndarray  # (H, W) float in [0, 1]
    v: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.part_index.shape

    def copy(self) -> "DenseSemanticsMap":
        return DenseSemanticsMap(self.part_index.copy(), self.u.copy(), self.v.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseSemanticsMap):
            return NotImplemented
        fg = self.part_index > 0
        return (
            np.array_equal(self.part_index, other.part_index)
            and np.array_equal(self.u[fg], other.u[fg])
            and np.array_equal(self.v[fg], other.v[fg])
        )


@dataclass
class DSAPImageSet:
    images: np.ndarray  # (24, S, S, 3) uint8
    valid: np.ndarray  # (24, S, S) bool

    @property
    def size(self) -> int:
        return self.images.shape[1]


@dataclass
class CoverageReport:
    per_part_valid_fraction: np.ndarray  # (24,)
    detected_part_count: int


def decode_iuv(encoded: np.ndarray) -> DenseSemanticsMap:
    """Decode a 3-channel 8-bit IUV image: (I, round(255 u), round(255 v))."""
    encoded = np.asarray(encoded)
    if encoded.ndim != 3 or encoded.shape[2] != 3:
        raise DecodeError(f"IUV map must be HxWx3, got shape {encoded.shape}")
    part = encoded[..., 0].astype(np.int64)
    bad = np.argwhere(part > NUM_PARTS)
    if len(bad):
        i, j = bad[0]
        raise DecodeError(f"part index {part[i, j]} > {NUM_PARTS} at pixel ({i}, {j})")
    u = encoded[..., 1].astype(np.float64) / 255.0
    v = encoded[..., 2].astype(np.float64) / 255.0
    return DenseSemanticsMap(part, u, v)


def encode_iuv(sem: DenseSemanticsMap) -> np.ndarray:
    out = np.zeros(sem.shape + (3,), dtype=np.uint8)
    fg = sem.part_index > 0
    out[..., 0] = sem.part_index.astype(np.uint8)
    out[..., 1] = np.where(fg, np.rint(np.clip(sem.u, 0, 1) * 255), 0).astype(np.uint8)
    out[..., 2] = np.where(fg, np.rint(np.clip(sem.v, 0, 1) * 255), 0).astype(np.uint8)
    return out


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_iuv(path) -> DenseSemanticsMap:
    with Image.open(path) as im:
        return decode_iuv(np.asarray(im.convert("RGB")))


def write_png(path, arr: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG")


def _check_pair(img: np.ndarray, sem: DenseSemanticsMap, S: int) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be HxWx3, got {img.shape}")
    if img.shape[:2] != sem.shape:
        raise ValueError(f"image {img.shape[:2]} and semantics {sem.shape} differ in size")
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")


def mean_fill(img: np.ndarray) -> np.ndarray:
    """Per-channel mean over all pixels, rounded to uint8."""
    return np.rint(img.reshape(-1, 3).astype(np.float64).mean(axis=0)).astype(np.uint8)


def texel_coords(u: np.ndarray, v: np.ndarray, S: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.minimum(np.floor(u * S).astype(np.int64), S - 1)
    cols = np.minimum(np.floor(v * S).astype(np.int64), S - 1)
    return np.maximum(rows, 0), np.maximum(cols, 0)


def _empty_set(img: np.ndarray, S: int) -> DSAPImageSet:
    images = np.empty((NUM_PARTS, S, S, 3), dtype=np.uint8)
    images[:] = mean_fill(img)
    return DSAPImageSet(images, np.zeros((NUM_PARTS, S, S), dtype=bool))


def warp_to_dsap(img: np.ndarray, sem: DenseSemanticsMap, S: int = 32) -> DSAPImageSet:
    """Copy every foreground pixel to texel (floor(u S), floor(v S)) of its part image.

    Collisions resolve in raster order, last write wins.
    """
    img = np.asarray(img, dtype=np.uint8)
    _check_pair(img, sem, S)
    out = _empty_set(img, S)
    part = sem.part_index.ravel()
    fg = np.flatnonzero(part > 0)
    if fg.size == 0:
        return out
    r, c = texel_coords(sem.u.ravel()[fg], sem.v.ravel()[fg], S)
    lin = (part[fg] - 1) * S * S + r * S + c
    # last pixel (in raster order) per texel
    winner = np.full(NUM_PARTS * S * S, -1, dtype=np.int64)
    np.maximum.at(winner, lin, np.arange(fg.size))
    hit = np.flatnonzero(winner >= 0)
    flat_img = out.images.reshape(-1, 3)
    flat_img[hit] = img.reshape(-1, 3)[fg[winner[hit]]]
    out.valid.reshape(-1)[hit] = True
    return out


def _nearest_indices(n_src: int, n_dst: int) -> np.ndarray:
    return np.minimum((np.arange(n_dst) * n_src) // n_dst, n_src - 1)


def crop_parts(img: np.ndarray, sem: DenseSemanticsMap, S: int = 32) -> DSAPImageSet:
    """Coarse alternative: each part's bounding box resized to SxS, no in-part alignment."""
    img = np.asarray(img, dtype=np.uint8)
    _check_pair(img, sem, S)
    out = _empty_set(img, S)
    fill = out.images[0, 0, 0].copy()
    for p in range(1, NUM_PARTS + 1):
        ys, xs = np.nonzero(sem.part_index == p)
        if ys.size == 0:
            continue
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        ri = y0 + _nearest_indices(y1 - y0, S)
        ci = x0 + _nearest_indices(x1 - x0, S)
        patch = img[np.ix_(ri, ci)]
        keep = sem.part_index[np.ix_(ri, ci)] > 0
        out.images[p - 1] = np.where(keep[..., None], patch, fill)
        out.valid[p - 1] = keep
    return out


def coverage_stats(dsap: DSAPImageSet) -> CoverageReport:
    S = dsap.size
    frac = dsap.valid.reshape(NUM_PARTS, -1).sum(axis=1) / float(S * S)
    return CoverageReport(frac, int((frac > 0).sum()))


def contact_sheet(dsap: DSAPImageSet, cols: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Tile the 24 part images (and masks) into a ``rows x cols`` grid, 1px gutters."""
    S = dsap.size
    rows = -(-NUM_PARTS // cols)
    sheet = np.zeros((rows * (S + 1) - 1, cols * (S + 1) - 1, 3), dtype=np.uint8)
    mask = np.zeros(sheet.shape[:2], dtype=np.uint8)
    for k in range(NUM_PARTS):
        r, c = divmod(k, cols)
        ys, xs = r * (S + 1), c * (S + 1)
        sheet[ys:ys + S, xs:xs + S] = dsap.images[k]
        mask[ys:ys + S, xs:xs + S] = dsap.valid[k] * 255
    return sheet, mask
