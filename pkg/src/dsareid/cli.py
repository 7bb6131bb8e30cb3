"""Command-line entry points: synth, warp, train, eval, report.

Configuration is a JSON file with one section per concern (``synth``, ``warp``,
``train``, ``model``, ``eval``, ``report``). Unknown keys are rejected and
command-line flags override file values. Every command writes its resolved
configuration next to its outputs.

Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numerical.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import synthdata
from .model import BRANCHES, FUSIONS, MODES, ModelConfig
from .retrieval import FEATURE_MODES, evaluate_checkpoint
from .semantics_warp import contact_sheet, coverage_stats, write_png
from .trainer import (ConfigError, DataError, NumericalError, TrainConfig, load_manifest, load_pair,
                      part_images, train)

log = logging.getLogger("dsareid")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4
OUTPUT_ROOT_ENV = "DSAREID_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class ReportParseError(DataError):
    pass


# -- configuration ------------------------------------------------------------

@dataclass
class SynthSection:
    num_ids: int = 8
    renders: int = 8
    cameras: int = 2
    split: str = "holdout:2"
    seed: int = 0
    height: int = 128
    width: int = 64
    texture: int = 32
    occluder_prob: float = 0.2
    drop_prob: float = 0.0
    uv_sigma: float = 0.0


@dataclass
class WarpSection:
    S: int = 32
    mode: str = "dsa"
    limit: int = 0  # 0: every manifest row
    sheet_cols: int = 6


@dataclass
class ModelSection:
    backbone: str = "toy"
    input_size: list | None = None  # None: the manifest's image size, else 256x128
    S: int = 32
    width_divisor: int = 8
    mode: str = "dsa"
    fusion: str = "elem-add"
    branches: str = "both"
    classifier_hidden: int = 512


@dataclass
class EvalSection:
    features: str = "mf-only"
    ranks: list = field(default_factory=lambda: [1, 5, 10])
    drop_dsag: bool = False


@dataclass
class ReportSection:
    plots: bool = True


@dataclass
class RunConfig:
    synth: SynthSection = field(default_factory=SynthSection)
    warp: WarpSection = field(default_factory=WarpSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["loss_weights"] = list(self.train.loss_weights)
        return d


def _fill_section(section, values: dict, where: str) -> None:
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(section)}
    for k, v in values.items():
        if k not in names:
            raise ConfigError(f"{where}: unknown key {k!r}")
        setattr(section, k, v)


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for name, values in doc.items():
        if name not in {f.name for f in dataclasses.fields(RunConfig)}:
            raise ConfigError(f"{path}: unknown section {name!r}")
        _fill_section(getattr(cfg, name), values, f"{path}:{name}")
    if isinstance(cfg.train.loss_weights, list):
        cfg.train.loss_weights = tuple(cfg.train.loss_weights)
    return cfg


def apply_overrides(section, args: argparse.Namespace, names) -> None:
    for n in names:
        v = getattr(args, n, None)
        if v is not None:
            setattr(section, n, v)


def output_dir(arg: str | None, command: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def echo_config(out: Path, command: str, cfg: RunConfig, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **extra, "config": cfg.to_dict()}
    (out / f"{command}_config.json").write_text(json.dumps(doc, indent=2))


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path) -> Path:
    s = cfg.synth
    for k in ("num_ids", "renders", "cameras", "height", "width", "texture"):
        if getattr(s, k) < 1:
            raise ConfigError(f"synth.{k} must be positive")
    if s.renders < 2:
        raise ConfigError("synth.renders must be >= 2")
    try:
        synthdata.make_dataset(
            out, num_ids=s.num_ids, renders=s.renders, cameras=s.cameras, split=s.split,
            seed=s.seed, H=s.height, W=s.width, T=s.texture, occluder_prob=s.occluder_prob,
            drop_prob=s.drop_prob, uv_sigma=s.uv_sigma)
    except synthdata.ParameterError as e:
        raise ConfigError(str(e)) from e
    echo_config(out, "synth", cfg, {})
    return out / "manifest.json"


def cmd_warp(cfg: RunConfig, manifest, out: Path) -> Path:
    w = cfg.warp
    if w.mode not in MODES:
        raise ConfigError(f"warp.mode must be one of {MODES}")
    entries = load_manifest(manifest)
    if w.limit:
        entries = entries[:w.limit]
    sheets = out / "sheets"
    sheets.mkdir(parents=True, exist_ok=True)
    rows = []
    for e in entries:
        img, sem = load_pair(e)
        dsap = part_images(img, sem, w.S, w.mode)
        sheet, _ = contact_sheet(dsap, w.sheet_cols)
        write_png(sheets / f"{e.image.stem}.png", sheet)
        frac = coverage_stats(dsap).per_part_valid_fraction
        rows += [(e.image.name, p + 1, repr(float(frac[p]))) for p in range(len(frac))]
    path = out / "coverage.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image", "part", "valid_fraction"])
        wr.writerows(rows)
    echo_config(out, "warp", cfg, {"manifest": str(manifest)})
    return path


def _manifest_size(manifest) -> tuple[int, int] | None:
    try:
        doc = json.loads(Path(manifest).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {manifest}: {e}") from e
    if isinstance(doc, dict) and "height" in doc and "width" in doc:
        return int(doc["height"]), int(doc["width"])
    return None


def model_config(cfg: RunConfig, manifest) -> ModelConfig:
    m = cfg.model
    size = m.input_size or _manifest_size(manifest) or (256, 128)
    if len(size) != 2:
        raise ConfigError("model.input_size needs two values")
    mc = ModelConfig(num_classes=2, backbone=m.backbone, input_size=tuple(int(x) for x in size),
                     S=m.S, width_divisor=m.width_divisor, mode=m.mode, fusion=m.fusion,
                     branches=m.branches, classifier_hidden=m.classifier_hidden)
    try:
        mc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return mc


def cmd_train(cfg: RunConfig, manifest, out: Path):
    mc = model_config(cfg, manifest)
    if isinstance(cfg.train.loss_weights, list):
        cfg.train.loss_weights = tuple(cfg.train.loss_weights)
    cfg.train.validate()
    echo_config(out, "train", cfg, {"manifest": str(manifest), "resolved_input_size": list(mc.input_size)})
    return train(cfg.train, mc, manifest, out)


def cmd_eval(cfg: RunConfig, checkpoint, manifest, out: Path):
    e = cfg.eval
    if e.features not in FEATURE_MODES:
        raise ConfigError(f"eval.features must be one of {FEATURE_MODES}")
    result = evaluate_checkpoint(checkpoint, manifest, e.features, tuple(e.ranks), e.drop_dsag)
    echo_config(out, "eval", cfg, {"checkpoint": str(checkpoint), "manifest": str(manifest)})
    (out / "result.json").write_text(result.to_json())
    table = result.table(Path(checkpoint).stem + f" ({e.features})")
    (out / "result.md").write_text(table + "\n")
    print(table)
    return result


def read_metrics(path) -> list[dict[str, float]]:
    """Parse an epoch metrics CSV. Malformed rows raise with their 1-based line number."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics_epochs.csv"
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ReportParseError(f"{path}:1: empty file") from None
    if "epoch" not in header or "lr" not in header:
        raise ReportParseError(f"{path}:1: header needs 'epoch' and 'lr' columns")
    rows = []
    for line_no, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise ReportParseError(f"{path}:{line_no}: expected {len(header)} fields, got {len(rec)}")
        try:
            rows.append({k: float(v) for k, v in zip(header, rec)})
        except ValueError as e:
            raise ReportParseError(f"{path}:{line_no}: {e}") from e
    return rows


def _run_name(path: Path) -> str:
    return (path if path.is_dir() else path.parent).name or str(path)


def cmd_report(cfg: RunConfig, paths, out: Path) -> Path:
    if not paths:
        raise UsageError("report needs at least one metrics file")
    runs = [(Path(p), read_metrics(p)) for p in paths]
    columns = ["epochs", "final_lr", "total", "id_mf", "id_fused_global", "id_fused_local",
               "triplet_fused_global", "triplet_fused_local"]
    lines = ["| run | " + " | ".join(columns) + " | mAP | Rank-1 |",
             "|" + "---|" * (len(columns) + 3)]
    for p, rows in runs:
        last = rows[-1] if rows else {}
        vals = [str(len(rows)), f"{last.get('lr', float('nan')):.3g}"]
        vals += [f"{last[c]:.4f}" if c in last else "-" for c in columns[2:]]
        res = (p if p.is_dir() else p.parent) / "result.json"
        if res.exists():
            r = json.loads(res.read_text())
            vals += [f"{100 * r['mAP']:.1f}", f"{100 * r['cmc'].get('1', float('nan')):.1f}"]
        else:
            vals += ["-", "-"]
        lines.append(f"| {_run_name(p)} | " + " | ".join(vals) + " |")
    out.mkdir(parents=True, exist_ok=True)
    table = out / "report.md"
    table.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if cfg.report.plots:
        _plot_curves(runs, out)
    echo_config(out, "report", cfg, {"inputs": [str(p) for p in paths]})
    return table


def _plot_curves(runs, out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for p, rows in runs:
        if rows and "total" in rows[0]:
            ax.plot([r["epoch"] for r in rows], [r["total"] for r in rows], label=_run_name(p))
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for p, rows in runs:
        ax.plot([r["epoch"] for r in rows], [r["lr"] for r in rows], label=_run_name(p))
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "lr.png", dpi=100)
    plt.close(fig)


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this taxonomy reserves 2 for config errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    p.add_argument("--print-defaults", action="store_true", help="print the default configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dsareid", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--num-ids", dest="num_ids", type=int)
    p.add_argument("--renders", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--split")
    p.add_argument("--seed", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--occluder-prob", dest="occluder_prob", type=float)

    p = sub.add_parser("warp", help="DSAP contact sheets and coverage CSV")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--S", type=int)
    p.add_argument("--limit", type=int)

    p = sub.add_parser("train", help="train both streams")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--fusion", choices=FUSIONS)
    p.add_argument("--branches", choices=BRANCHES)
    p.add_argument("--backbone", choices=("toy", "resnet50"))
    p.add_argument("--width-divisor", dest="width_divisor", type=int)
    p.add_argument("--input-size", dest="input_size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters-per-epoch", dest="iters_per_epoch", type=int)
    p.add_argument("--P", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--features", choices=FEATURE_MODES)
    p.add_argument("--ranks", type=int, nargs="+")
    p.add_argument("--drop-dsag", dest="drop_dsag", action="store_true", default=None,
                   help="delete DSAG-Stream weights before loading")

    p = sub.add_parser("report", help="merge metrics from runs into a table and plots")
    _common(p)
    p.add_argument("metrics", nargs="*", help="metrics_epochs.csv files or run directories")
    p.add_argument("--no-plots", dest="plots", action="store_false", default=None)
    return ap


def _require(value, name):
    if not value:
        raise UsageError(f"--{name} is required")
    return value


def run(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command is None:
        ap.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        print(json.dumps(RunConfig().to_dict(), indent=2))
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        out = output_dir(args.out, args.command)
        if args.command == "synth":
            apply_overrides(cfg.synth, args, ["num_ids", "renders", "cameras", "split", "seed",
                                              "height", "width", "occluder_prob"])
            print(cmd_synth(cfg, out))
        elif args.command == "warp":
            apply_overrides(cfg.warp, args, ["mode", "S", "limit"])
            print(cmd_warp(cfg, _require(args.manifest, "manifest"), out))
        elif args.command == "train":
            apply_overrides(cfg.model, args, ["mode", "fusion", "branches", "backbone",
                                              "width_divisor", "input_size"])
            apply_overrides(cfg.train, args, ["epochs", "iters_per_epoch", "P", "K", "seed",
                                              "checkpoint_every"])
            res = cmd_train(cfg, _require(args.manifest, "manifest"), out)
            print(res.checkpoint)
        elif args.command == "eval":
            apply_overrides(cfg.eval, args, ["features", "ranks", "drop_dsag"])
            cmd_eval(cfg, _require(args.checkpoint, "checkpoint"), _require(args.manifest, "manifest"), out)
        elif args.command == "report":
            apply_overrides(cfg.report, args, ["plots"])
            cmd_report(cfg, args.metrics, out)
    except UsageError as e:
        print(f"dsareid: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"dsareid: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"dsareid: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as e:
        print(f"dsareid: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
