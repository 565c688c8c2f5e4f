#!/usr/bin/env python3
"""Measure what each context order buys on a source of known entropy.

Generates row-wise Markov index grids from a cyclic transition matrix whose
conditional entropy is exactly log2(fanout) bits, codes them with the static
coder and adaptive context orders 0-3, and prints realized bits/index per
order next to the entropy floor.  The first-order jump captures nearly all of
the structure; higher orders pay dilution costs for nothing on this source.

Example:
    python3 scripts/context_order_ladder.py --k 8 --fanout 2 --size 192x192
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from hvqc.context_coders import code_indices_context_stats, code_indices_static_stats
from hvqc.synthetic import cyclic_transition, markov_row_indices


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=int, default=8, help="alphabet size")
    ap.add_argument("--fanout", type=int, default=2,
                    help="successors per symbol; entropy floor is log2(fanout)")
    ap.add_argument("--size", default="192x192", help="grid size HxW")
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", type=Path, help="optional output CSV")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    h, w = (int(s) for s in args.size.lower().split("x"))
    T = cyclic_transition(args.k, args.fanout)
    floor = float(np.log2(args.fanout))

    labels = ["static", "o0", "o1", "o2", "o3"]
    bpi = {name: [] for name in labels}
    for trial in range(args.trials):
        rng = np.random.default_rng(args.seed + trial)
        grid = markov_row_indices((h, w), T, rng)
        counts = np.maximum(np.bincount(grid.reshape(-1), minlength=args.k), 1)
        _, stats = code_indices_static_stats(grid, counts)
        bpi["static"].append(stats.bits_per_index)
        for order in range(4):
            _, stats = code_indices_context_stats(grid, order, args.k)
            bpi[f"o{order}"].append(stats.bits_per_index)

    print(f"cyclic Markov source: K={args.k} fanout={args.fanout} "
          f"size={h}x{w} trials={args.trials}")
    print(f"conditional entropy floor: {floor:.4f} bits/index\n")
    print(f"{'coder':8s} {'bits/index':>10s} {'excess':>8s}")
    means = {}
    for name in labels:
        m = float(np.mean(bpi[name]))
        means[name] = m
        print(f"{name:8s} {m:10.4f} {m - floor:8.4f}")

    gain01 = means["o0"] - means["o1"]
    gain12 = means["o1"] - means["o2"]
    print(f"\norder-1 gain over order-0: {gain01:+.4f} bits/index")
    print(f"order-2 gain over order-1: {gain12:+.4f} bits/index")

    if args.csv:
        with args.csv.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coder", "trial", "bits_per_index"])
            for name in labels:
                for t, v in enumerate(bpi[name]):
                    writer.writerow([name, t, f"{v:.6f}"])
        print(f"per-trial results: {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
