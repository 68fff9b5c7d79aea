"""Train the toy segmenter on synthetic frames and score it on unseen ones.

    python3 scripts/train_toy.py --frames 500 --epochs 15 --out runs/toy
"""
import argparse
import json
import logging
from pathlib import Path

from matis.benchmark import toy_run
from matis.model import ToyModelConfig, save_checkpoint
from matis.train import OptimConfig, set_deterministic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=500)
    ap.add_argument("--test-frames", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--queries", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    set_deterministic(1)

    run = toy_run(
        args.frames,
        args.test_frames,
        ToyModelConfig(n_queries=args.queries, seed=args.seed),
        OptimConfig(epochs=args.epochs, seed=args.seed),
    )
    rep = run.report
    print(f"train {run.train_seconds:.1f}s  final loss {run.curve[-1]:.4f}")
    print(f"held-out mIoU {rep.miou:.4f}  IoU {rep.iou:.4f}  mcIoU {rep.mciou:.4f}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run.model, args.out / "toy.ckpt", extra={"epochs": args.epochs})
        doc = {"curve": run.curve, "train_seconds": run.train_seconds, "report": rep.to_json()}
        (args.out / "run.json").write_text(json.dumps(doc, indent=1))


if __name__ == "__main__":
    main()
