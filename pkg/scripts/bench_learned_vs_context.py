#!/usr/bin/env python3
"""Train the conditional rate model on Gauss-Markov textures, then bench it.

Fits a codebook to AR(1) feature grids, trains the latent-conditioned index
model on quantized grids, saves both checkpoints, and runs `hvqc bench` with
the learned strategy alongside the static and context-order coders on fresh
grids from the same source.  On correlated textures the learned row should
come in below the order-1 context coder once training has converged.

Example:
    python3 scripts/bench_learned_vs_context.py --out-dir /tmp/lvc
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from hvqc.cli import main as cli_main
from hvqc.codebook import Codebook, save_codebook
from hvqc.hyperprior import HyperConfig, init_hyper_params, save_checkpoint, train_stage_b
from hvqc.synthetic import ar1_feature_grid


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", type=Path, default=Path("bench_learned_out"),
                    help="directory for checkpoints and the bench CSV")
    ap.add_argument("--k", type=int, default=16, help="codebook size")
    ap.add_argument("--depth", type=int, default=2, help="feature dimension")
    ap.add_argument("--corr-len", type=float, default=4.0,
                    help="correlation length of the synthetic source")
    ap.add_argument("--train-grids", type=int, default=128,
                    help="number of 24x24 training grids")
    ap.add_argument("--steps", type=int, default=3600,
                    help="total training steps (split over a two-phase schedule)")
    ap.add_argument("--bench-size", default="48x48", help="grid size for the bench")
    ap.add_argument("--trials", type=int, default=3, help="bench trials")
    ap.add_argument("--seed", type=int, default=0)
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    args.out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(args.seed)
    train = [ar1_feature_grid(args.depth, (24, 24), args.corr_len, rng)
             for _ in range(args.train_grids)]

    samples = np.concatenate([g.reshape(args.depth, -1).T for g in train[:8]])
    cent, _ = kmeans2(samples, args.k, minit="++", seed=7, iter=25)
    cb = Codebook(cent)

    params = init_hyper_params(
        HyperConfig(depth=args.depth), np.random.default_rng(args.seed))
    t0 = time.time()
    # two-phase schedule: most steps at the base rate, the rest at 1/3
    phase1 = (args.steps * 2) // 3
    for i, (steps, lr) in enumerate(((phase1, 3e-3), (args.steps - phase1, 1e-3))):
        res = train_stage_b(train, cb, params, steps, lr, seed=args.seed + 50 + i)
        cells = train[0].shape[1] * train[0].shape[2]
        print(f"phase {i}: {steps} steps @ lr={lr:g}, "
              f"index rate {res.index_bits[-1] / cells:.3f} bits/cell, "
              f"latent rate {res.latent_bits[-1] / cells:.3f} bits/cell")
    print(f"training took {time.time() - t0:.1f}s")

    cb_path = args.out_dir / "codebook.vqcb"
    hp_path = args.out_dir / "hyper.vqhp"
    save_codebook(cb_path, cb)
    save_checkpoint(hp_path, params)

    csv_path = args.out_dir / "bench.csv"
    rc = cli_main([
        "bench",
        "--strategies", "static,o0,o1,o2,hyper",
        "--source", "ar1",
        "--corr-len", str(args.corr_len),
        "--k", str(args.k),
        "--size", args.bench_size,
        "--trials", str(args.trials),
        "--seed", str(args.seed + 500),
        "--codebook", str(cb_path),
        "--hyper", str(hp_path),
        "--csv", str(csv_path),
    ])
    if rc != 0:
        print(f"bench failed with exit code {rc}", file=sys.stderr)
        return rc

    with csv_path.open() as fh:
        fh.readline()  # version header
        rows = list(csv.DictReader(fh))
    mean_bpi = defaultdict(list)
    for row in rows:
        mean_bpi[row["strategy"]].append(float(row["bits_per_index"]))

    print(f"\nmean bits/index over {args.trials} trials "
          f"(source: AR(1), corr-len {args.corr_len}, K={args.k}):")
    for name in ("static", "o0", "o1", "o2", "hyper"):
        if name in mean_bpi:
            print(f"  {name:6s} {np.mean(mean_bpi[name]):.4f}")
    margin = np.mean(mean_bpi["o1"]) - np.mean(mean_bpi["hyper"])
    print(f"\nlearned model vs order-1 context: {margin:+.4f} bits/index "
          f"({'learned wins' if margin > 0 else 'context wins'})")
    print(f"full results: {csv_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
