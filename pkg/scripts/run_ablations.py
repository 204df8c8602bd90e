"""Ablation sweeps on the default synthetic benchmark.

Each sweep trains one run per axis value and prints a comparison table:

  loss-set   -- I2V-triplet-only vs integrated triplets vs +classification
                vs full transfer model
  bp         -- whether the transfer losses propagate gradient into the
                video branch
  blocks     -- number of non-local attention blocks
  T          -- training clip length
  teacher    -- simultaneous training vs pre-trained frozen teacher

Usage: python scripts/run_ablations.py --axis loss-set [--seed 0]
"""

import argparse

from i2vmatch.training import benchmark_config, sweep, sweep_table

AXES = {
    "loss-set": ("loss_set", ["i2v-tri", "integrated-tri", "baseline", "full"]),
    "bp": ("bp_to_video", [False, True]),
    "blocks": ("nonlocal_blocks", [0, 1, 2, 4]),
    "T": ("T", [1, 2, 4, 8]),
    "teacher": ("teacher_mode", ["simultaneous", "pretrained"]),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--axis", choices=sorted(AXES) + ["all"], default="all")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    names = sorted(AXES) if args.axis == "all" else [args.axis]
    cfg = benchmark_config(seed=args.seed)
    for name in names:
        axis, values = AXES[name]
        print(f"\n== sweep over {name} ==")
        rows = sweep(axis, values, cfg)
        print(sweep_table(rows))


if __name__ == "__main__":
    main()
