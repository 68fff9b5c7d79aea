"""Region-selection ablation on calibrated noisy proposals.

    python3 scripts/selection_ablation.py --frames 200 --val-frames 100
"""
import argparse

from matis.benchmark import selection_ablation
from matis.metrics import format_table
from matis.synth import NoiseConfig, SynthConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--val-frames", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    synth = SynthConfig(seed=args.seed)
    rows = selection_ablation(synth, NoiseConfig(), args.frames, args.val_frames, args.seed)
    print(format_table(rows, synth.class_names, label="Inference strategy"), end="")


if __name__ == "__main__":
    main()
