#!/usr/bin/env python3
"""Train and evaluate every method on the synthetic motif corpus and print a results table."""

import argparse
import time

import torch

from cgp_tuning.config import TRAINABLE_METHODS, desk_train_config
from cgp_tuning.evaluation import evaluate
from cgp_tuning.graph_model import synth_dataset
from cgp_tuning.lm import TinyLM, TinyLMConfig
from cgp_tuning.model import build_model
from cgp_tuning.training import train

METHODS = ("zero-shot", "grace", "prompt", "projector", "gnp", "cgp")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--methods", nargs="+", default=list(METHODS), choices=METHODS)
    parser.add_argument("--train-size", type=int, default=500)
    parser.add_argument("--test-size", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0, help="model and schedule seed")
    parser.add_argument("--lm-seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, help="override the desk schedule")
    args = parser.parse_args()
    torch.set_num_threads(1)

    train_set, test_set = synth_dataset(1, args.train_size), synth_dataset(2, args.test_size)
    lm = TinyLM(TinyLMConfig(seed=args.lm_seed))
    cfg = desk_train_config(seed=args.seed)
    if args.epochs:
        cfg.epochs = args.epochs

    print(f"{'method':<10} {'acc':>6} {'prec':>6} {'rec':>6} {'f1':>6} {'train s':>8} {'infer min':>10}")
    for method in args.methods:
        model = build_model(lm, method, seed=args.seed)
        start = time.perf_counter()
        if method in TRAINABLE_METHODS:
            train(model, train_set, cfg)
        seconds = time.perf_counter() - start
        report, _ = evaluate(model, test_set)
        row = report.as_row()
        print(f"{method:<10} {row['accuracy']:>6.3f} {row['precision']:>6.3f} {row['recall']:>6.3f} "
              f"{row['f1']:>6.3f} {seconds:>8.1f} {report.total_inference_minutes:>10.4f}", flush=True)


if __name__ == "__main__":
    main()
