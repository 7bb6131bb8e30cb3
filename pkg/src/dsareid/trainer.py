"""PK sampling, paired augmentation, learning-rate schedule and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .fusion import DEFAULT_WEIGHTS, LOSS_COLUMNS, total_loss
from .merge_topology import lr_swap_table
from .model import DSAReID, ModelConfig
from .semantics_warp import DenseSemanticsMap, crop_parts, decode_iuv, read_image, warp_to_dsap

log = logging.getLogger(__name__)

IMAGE_MEAN = np.array([0.485, 0.456, 0.406]) * 255
IMAGE_STD = np.array([0.229, 0.224, 0.225]) * 255

STEP_COLUMNS = ["step", "epoch", "lr"] + LOSS_COLUMNS
EPOCH_COLUMNS = ["epoch", "lr", "steps"] + LOSS_COLUMNS


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    P: int = 16
    K: int = 4
    margin: float = 0.3
    weight_decay: float = 5e-4
    decoupled_weight_decay: bool = False  # AdamW-style decay instead of L2 folded into the gradient
    warmup_epochs: int = 20
    lr_start: float = 8e-6
    lr_base: float = 8e-4
    decay_factor: float = 0.5
    decay_every: int = 40
    epochs: int = 200
    iters_per_epoch: int = 0  # 0: ceil(train images / batch size)
    erase_prob: float = 0.5
    flip_prob: float = 0.5
    crop_pad: int = 10
    label_smoothing: float = 0.1
    loss_weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    checkpoint_every: int = 20
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError("K must be >= 2 for batch-hard mining")
        if self.P < 2:
            raise ConfigError("P must be >= 2")
        if self.lr_start <= 0 or self.lr_base <= 0 or self.decay_factor <= 0:
            raise ConfigError("learning rates must stay positive")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.decay_every < 1:
            raise ConfigError("bad epoch counts")
        if not 0 <= self.erase_prob <= 1 or not 0 <= self.flip_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights needs three values")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Linear warmup from ``lr_start`` to ``lr_base``, then step decay."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr_start + (epoch / cfg.warmup_epochs) * (cfg.lr_base - cfg.lr_start)
    return cfg.lr_base * cfg.decay_factor ** ((epoch - cfg.warmup_epochs) // cfg.decay_every)


# -- manifest -----------------------------------------------------------------

@dataclass
class Entry:
    image: Path
    iuv: Path
    identity: int
    camera: int
    split: str


def load_manifest(path) -> list[Entry]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    rows = doc["entries"] if isinstance(doc, dict) else doc
    out = []
    for k, r in enumerate(rows):
        try:
            out.append(Entry(path.parent / r["image"], path.parent / r["iuv"],
                             int(r["identity"]), int(r["camera"]), str(r["split"])))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"manifest row {k}: {e}") from e
    return out


def load_pair(entry: Entry, size: tuple[int, int] | None = None):
    """Read an image and its IUV map, resizing both (image bilinear, IUV nearest) if needed."""
    try:
        img = read_image(entry.image)
        with Image.open(entry.iuv) as im:
            iuv = np.asarray(im.convert("RGB"))
    except OSError as e:
        raise DataError(f"cannot read {entry.image} / {entry.iuv}: {e}") from e
    if img.shape[:2] != iuv.shape[:2]:
        raise DataError(f"{entry.image}: image and IUV sizes differ")
    if size is not None and img.shape[:2] != tuple(size):
        h, w = size
        img = np.asarray(Image.fromarray(img).resize((w, h), Image.BILINEAR))
        iuv = np.asarray(Image.fromarray(iuv).resize((w, h), Image.NEAREST))
    return img, decode_iuv(iuv)


# -- sampling -----------------------------------------------------------------

@dataclass
class TrainBatch:
    indices: list[int]
    labels: list[int]
    images: torch.Tensor | None = None
    dsap: torch.Tensor | None = None


def pk_sample(identities, P: int, K: int, rng: np.random.Generator) -> TrainBatch:
    """``identities`` lists the identity of every sample. Returns P x K sample indices."""
    by_id: dict[int, list[int]] = {}
    for i, pid in enumerate(identities):
        by_id.setdefault(int(pid), []).append(i)
    ids = sorted(by_id)
    if len(ids) < P:
        raise ConfigError(f"need at least P={P} identities, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=P, replace=False)
    indices, labels = [], []
    for c in chosen:
        pool = by_id[ids[c]]
        picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
        indices += [pool[j] for j in picks]
        labels += [ids[c]] * K
    return TrainBatch(indices, labels)


# -- augmentation -------------------------------------------------------------

_SWAP = np.array(lr_swap_table())


def random_crop(img, sem: DenseSemanticsMap, top: int, left: int, pad: int):
    """Zero/background pad by ``pad`` then crop the original size at (top, left)."""
    if pad == 0:
        return img, sem
    H, W = sem.shape
    P = ((pad, pad), (pad, pad))
    img_p = np.pad(img, P + ((0, 0),))
    sl = (slice(top, top + H), slice(left, left + W))
    part = np.pad(sem.part_index, P)[sl]
    u = np.pad(sem.u, P)[sl]
    v = np.pad(sem.v, P)[sl]
    return img_p[sl].copy(), DenseSemanticsMap(part.copy(), u.copy(), v.copy())


def hflip(img, sem: DenseSemanticsMap):
    """Mirror image and semantics; left/right part labels swap, UV kept."""
    part = _SWAP[sem.part_index[:, ::-1]]
    return (img[:, ::-1].copy(),
            DenseSemanticsMap(part, sem.u[:, ::-1].copy(), sem.v[:, ::-1].copy()))


def erase(img, sem: DenseSemanticsMap, rect, fill):
    """Overwrite ``rect`` = (y0, x0, y1, x1) with ``fill`` and mark it background."""
    y0, x0, y1, x1 = rect
    img = img.copy()
    sem = sem.copy()
    img[y0:y1, x0:x1] = fill
    sem.part_index[y0:y1, x0:x1] = 0
    sem.u[y0:y1, x0:x1] = 0.0
    sem.v[y0:y1, x0:x1] = 0.0
    return img, sem


def sample_erase_rect(rng, H, W, sl=0.02, sh=0.4, r1=0.3, attempts=100):
    for _ in range(attempts):
        area = rng.uniform(sl, sh) * H * W
        aspect = math.exp(rng.uniform(math.log(r1), math.log(1 / r1)))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if 0 < h < H and 0 < w < W:
            y0 = int(rng.integers(0, H - h + 1))
            x0 = int(rng.integers(0, W - w + 1))
            return y0, x0, y0 + h, x0 + w
    return None


def augment(img, sem: DenseSemanticsMap, rng: np.random.Generator, p_erase: float = 0.5,
            pad: int = 10, p_flip: float = 0.5):
    """Joint crop/flip on image and semantics, then random erasing (semantics -> background)."""
    H, W = sem.shape
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    img, sem = random_crop(img, sem, top, left, pad)
    if rng.random() < p_flip:
        img, sem = hflip(img, sem)
    if rng.random() < p_erase:
        rect = sample_erase_rect(rng, H, W)
        if rect is not None:
            y0, x0, y1, x1 = rect
            fill = rng.integers(0, 256, size=(y1 - y0, x1 - x0, 3), dtype=np.uint8)
            img, sem = erase(img, sem, rect, fill)
    return img, sem


# -- tensors ------------------------------------------------------------------

def image_tensor(imgs) -> torch.Tensor:
    arr = (np.stack(imgs).astype(np.float32) - IMAGE_MEAN) / IMAGE_STD
    return torch.from_numpy(arr.astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def dsap_tensor(sets) -> torch.Tensor:
    arr = (np.stack([s.images for s in sets]).astype(np.float32) - IMAGE_MEAN) / IMAGE_STD
    return torch.from_numpy(arr.astype(np.float32)).permute(0, 1, 4, 2, 3).contiguous()


def part_images(img, sem, S: int, mode: str):
    return warp_to_dsap(img, sem, S) if mode == "dsa" else crop_parts(img, sem, S)


def build_batch(batch: TrainBatch, pairs, rng, tcfg: TrainConfig, mcfg: ModelConfig) -> TrainBatch:
    imgs, sets = [], []
    for i in batch.indices:
        img, sem = augment(*pairs[i], rng, tcfg.erase_prob, tcfg.crop_pad, tcfg.flip_prob)
        imgs.append(img)
        sets.append(part_images(img, sem, mcfg.S, mcfg.mode))
    batch.images = image_tensor(imgs)
    batch.dsap = dsap_tensor(sets)
    return batch


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "dsareid-checkpoint/1"


def save_checkpoint(path, model: DSAReID, mcfg: ModelConfig, tcfg: TrainConfig, epoch: int,
                    label_map: dict[int, int]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "model_config": mcfg.to_dict(),
        "train_config": asdict(tcfg),
        "epoch": epoch,
        "label_map": {str(k): v for k, v in label_map.items()},
        "mf": model.mf.state_dict(),
        "dsag": model.dsag.state_dict(),
        "heads": model.heads.state_dict(),
        "fusion": model.fusion.state_dict() if model.fusion is not None else None,
    }, path)


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from e
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return ckpt


def model_config_from(ckpt: dict) -> ModelConfig:
    d = dict(ckpt["model_config"])
    d["input_size"] = tuple(d["input_size"])
    return ModelConfig(**d)


# -- training loop ------------------------------------------------------------

def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    step_rows: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)


def train(tcfg: TrainConfig, mcfg: ModelConfig, manifest, out_dir) -> TrainResult:
    """Train on the ``split == "train"`` rows of ``manifest``; write checkpoints and metrics."""
    tcfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = [e for e in load_manifest(manifest) if e.split == "train"]
    if not entries:
        raise DataError("manifest has no training rows")
    label_map = {pid: k for k, pid in enumerate(sorted({e.identity for e in entries}))}
    if len(label_map) < tcfg.P:
        raise ConfigError(f"need at least P={tcfg.P} identities, dataset has {len(label_map)}")
    mcfg.num_classes = len(label_map)
    mcfg.validate()

    (out_dir / "config.json").write_text(json.dumps(
        {"train": asdict(tcfg), "model": mcfg.to_dict(), "manifest": str(manifest)}, indent=2))

    torch.set_num_threads(tcfg.threads)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    model = DSAReID(mcfg)
    params = list(model.parameters())
    adam = torch.optim.AdamW if tcfg.decoupled_weight_decay else torch.optim.Adam
    opt = adam(params, lr=lr_schedule(0, tcfg), weight_decay=tcfg.weight_decay)

    pairs = [load_pair(e, mcfg.input_size) for e in entries]
    identities = [e.identity for e in entries]
    iters = tcfg.iters_per_epoch or math.ceil(len(entries) / tcfg.batch_size)

    ckpt_dir = out_dir / "checkpoints"
    step_rows, epoch_rows = [], []
    step = 0
    for epoch in range(tcfg.epochs):
        lr = lr_schedule(epoch, tcfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
        for _ in range(iters):
            batch = build_batch(pk_sample(identities, tcfg.P, tcfg.K, rng), pairs, rng, tcfg, mcfg)
            labels = torch.tensor([label_map[p] for p in batch.labels])
            bundle = model(batch.images, batch.dsap)
            report = total_loss(bundle, model.heads, labels, tcfg.loss_weights,
                                tcfg.margin, tcfg.label_smoothing)
            row = report.row()
            if not all(math.isfinite(v) for v in row.values()):
                snapshot = {"step": step, "epoch": epoch, "lr": lr, **row}
                (out_dir / "diagnostic.json").write_text(json.dumps(snapshot, indent=2))
                raise NumericalError(f"non-finite loss at step {step}", snapshot)
            opt.zero_grad()
            report.total.backward()
            opt.step()
            step_rows.append({"step": step, "epoch": epoch, "lr": lr, **row})
            for k in LOSS_COLUMNS:
                sums[k] += row[k]
            step += 1
        epoch_rows.append({"epoch": epoch, "lr": lr, "steps": iters,
                           **{k: v / iters for k, v in sums.items()}})
        log.info("epoch %d lr %.3g total %.4f", epoch, lr, epoch_rows[-1]["total"])
        if tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:04d}.pt", model, mcfg, tcfg, epoch + 1, label_map)

    final = ckpt_dir / "final.pt"
    save_checkpoint(final, model, mcfg, tcfg, tcfg.epochs, label_map)
    _write_csv(out_dir / "metrics_steps.csv", STEP_COLUMNS, step_rows)
    _write_csv(out_dir / "metrics_epochs.csv", EPOCH_COLUMNS, epoch_rows)
    return TrainResult(out_dir, final, step_rows, epoch_rows)
