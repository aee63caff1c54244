#!/usr/bin/env python3
"""Train CGP with each component removed in turn on the synthetic corpus."""

import argparse

import torch

from cgp_tuning.config import ABLATION_TOGGLES, desk_train_config
from cgp_tuning.evaluation import run_ablation
from cgp_tuning.graph_model import synth_dataset
from cgp_tuning.lm import TinyLM


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--toggles", nargs="+", default=list(ABLATION_TOGGLES), choices=ABLATION_TOGGLES)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int)
    args = parser.parse_args()
    torch.set_num_threads(1)

    cfg = desk_train_config(seed=args.seed)
    if args.epochs:
        cfg.epochs = args.epochs
    results = run_ablation(TinyLM(), synth_dataset(1, 500), synth_dataset(2, 100), cfg, args.toggles, seed=args.seed)
    full = results["full"].accuracy
    print(f"{'variant':<16} {'acc':>6} {'f1':>6} {'delta':>7}")
    for name, report in results.items():
        print(f"{name:<16} {report.accuracy:>6.3f} {report.f1_macro:>6.3f} {report.accuracy - full:>+7.3f}")


if __name__ == "__main__":
    main()
