"""Ambiguous-pair video benchmark: frame baseline against temporal relabeling.

Trains the frame model once, then a temporal head for every Time MLP x
presence cell and each window size, over several head seeds.

    MATIS_BENCH_THREADS=4 python3 scripts/temporal_bench.py --seeds 3 --windows 8,2
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from matis.benchmark import VideoBenchConfig, run_baseline, set_threads, table4_rows, temporal_ablation
from matis.metrics import format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, default=3, help="head seeds per cell")
    ap.add_argument("--windows", default="8,2")
    ap.add_argument("--head-videos", type=int)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    set_threads()

    cfg = VideoBenchConfig(seed=args.seed)
    if args.head_videos:
        cfg.head_videos = args.head_videos
    t0 = time.time()
    run = run_baseline(cfg)
    windows = tuple(int(w) for w in args.windows.split(","))
    records = temporal_ablation(run, seeds=tuple(range(args.seeds)), windows=windows)

    base = run.baseline_report()
    rows = [("frame baseline", base)] + [(label, rep) for label, rep, _, _ in table4_rows(records)]
    print(format_table(rows, cfg.synth.class_names, label="Time MLP / presence"), end="")
    for w in windows:
        vals = [r["report"].mciou for r in records if r["window"] == w and r["time_mlp"] and r["presence"]]
        print(f"W={w}  mcIoU {np.mean(vals):.4f}  per seed {[round(v, 4) for v in vals]}")
    print(f"total {time.time() - t0:.0f}s")
    if args.out:
        doc = {
            "config": cfg.to_json(),
            "baseline": base.to_json(),
            "runs": [{k: v for k, v in r.items() if k != "report"} | {"mciou": r["report"].mciou} for r in records],
        }
        args.out.write_text(json.dumps(doc, indent=1))


if __name__ == "__main__":
    main()
