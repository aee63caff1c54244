#!/usr/bin/env python3
"""Score-entry counts and wall time of the three aligners over a (nodes, tokens) grid."""

import argparse

import torch

from cgp_tuning.evaluation import DEFAULT_GRID, bench_alignment_scaling, parse_grid, write_bench_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--grid", help="e.g. 128x128,256x256 (default: {128,256,512}^2)")
    parser.add_argument("--d-lm", type=int, default=64)
    parser.add_argument("--out", help="optional CSV path")
    args = parser.parse_args()
    torch.set_num_threads(1)

    grid = parse_grid(args.grid) if args.grid else DEFAULT_GRID
    rows = bench_alignment_scaling(grid, d_lm=args.d_lm)
    fmt = lambda x: "-" if x is None else f"{x:.2f}"  # noqa: E731
    print(f"{'method':<10} {'|V|_k':>6} {'N_t':>6} {'entries':>10} {'formula':>10} {'ms':>8} {'x2 text':>8} {'x2 both':>8}")
    for r in rows:
        print(f"{r.method:<10} {r.num_nodes:>6} {r.num_tokens:>6} {r.score_entries:>10} {r.formula_entries:>10} "
              f"{1000 * r.wall_time_s:>8.2f} {fmt(r.token_doubling_ratio):>8} {fmt(r.joint_doubling_ratio):>8}")
    if args.out:
        write_bench_csv(rows, args.out)


if __name__ == "__main__":
    main()
