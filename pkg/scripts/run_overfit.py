"""Desk-scale overfit run: DSA vs CSA on an 8-identity synthetic set.

    python scripts/run_overfit.py --out runs/overfit
"""
import argparse
import json
import logging
import time
from pathlib import Path

from dsareid.model import ModelConfig
from dsareid.retrieval import evaluate_checkpoint
from dsareid.synthdata import make_dataset
from dsareid.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--iters-per-epoch", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--modes", nargs="+", default=["dsa", "csa"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    make_dataset(out / "data", num_ids=8, renders=8, split="holdout:2", seed=args.seed, H=128, W=64)
    manifest = out / "data" / "manifest.json"
    summary = {}
    for mode in args.modes:
        t0 = time.time()
        res = train(TrainConfig(P=8, K=4, epochs=args.epochs, iters_per_epoch=args.iters_per_epoch,
                                seed=args.seed, checkpoint_every=0),
                    ModelConfig(input_size=(128, 64), width_divisor=8, mode=mode), manifest, out / mode)
        row = {"train_minutes": (time.time() - t0) / 60}
        for feats in ("mf-only", "fused"):
            r = evaluate_checkpoint(res.checkpoint, manifest, feats)
            row[feats] = {"Rank-1": r.cmc[1], "mAP": r.mAP}
        summary[mode] = row
        print(mode, json.dumps(row))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
