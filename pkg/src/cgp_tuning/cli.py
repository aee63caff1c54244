"""Command-line entry points: synth, prepare, train, eval, bench, infer.

Exit codes: 0 success, 2 usage / malformed input / bad grid, 3 I/O failure,
4 non-finite training loss, 5 checkpoint incompatible with the method.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import evaluation
from .config import (
    METHODS,
    TRAINABLE_METHODS,
    AblationConfig,
    AlignConfig,
    EncoderConfig,
    RunConfig,
    apply_overrides,
    config_snapshot,
    derive_seed,
    desk_train_config,
    load_config_file,
)
from .graph_model import (
    GraphFormatError,
    MotifSpec,
    filter_oversized,
    read_corpus,
    split_dataset,
    synth_dataset,
    synth_imbalanced,
    undersample,
    write_corpus,
)
from .lm import TinyLM, TinyLMConfig
from .model import build_model
from .training import CheckpointMismatch, NonFiniteLoss, load_checkpoint, read_checkpoint, save_checkpoint, train

logger = logging.getLogger("cgp_tuning")

EXIT_USAGE, EXIT_IO, EXIT_NONFINITE, EXIT_MISMATCH = 2, 3, 4, 5


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------------


def _flag_overrides(args) -> dict:
    flat = {}
    for flag, key in (
        ("method", "method"), ("seed", "seed"), ("corpus", "corpus"), ("graphs", "graphs"),
        ("checkpoint", "checkpoint"), ("out", "out"), ("model", "model"),
        ("max_train_tokens", "max_train_tokens"), ("max_eval_tokens", "max_eval_tokens"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            flat[key] = value
    if getattr(args, "long_code", False):
        flat["long_code"] = True
    for toggle in getattr(args, "ablate", None) or ():
        flat[f"ablation.{toggle}"] = True
    return flat


def resolve_config(args) -> RunConfig:
    """Defaults, then the preset schedule, then the config file, then explicit flags."""
    cfg = RunConfig()
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    flags = _flag_overrides(args)
    model = flags.get("model", file_values.get("model", cfg.model))
    preset = getattr(args, "preset", None) or ("desk" if model == "tiny" else "full")
    if preset == "desk":
        cfg.train = desk_train_config()
    try:
        cfg = apply_overrides(cfg, {**file_values, **flags})
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    cfg.train.seed = cfg.seed
    cfg.train.max_train_tokens = cfg.max_train_tokens
    return cfg


def load_lm(spec: str):
    if spec == "tiny":
        return TinyLM(TinyLMConfig())
    if spec.startswith("hf:"):
        try:
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError:
            raise UsageError("external models need the 'transformers' package") from None
        from .lm import HuggingFaceLM

        name = spec[3:]
        return HuggingFaceLM(AutoModelForCausalLM.from_pretrained(name), AutoTokenizer.from_pretrained(name))
    raise UsageError(f"unknown model spec {spec!r}; use 'tiny' or 'hf:<name-or-path>'")


def _corpus_file(path: str | None, default_name: str) -> Path:
    if path is None:
        raise UsageError("--corpus is required")
    p = Path(path)
    return p / default_name if p.is_dir() else p


def _model_from_config(cfg: RunConfig, lm, method: str | None = None):
    return build_model(
        lm, method or cfg.method, seed=derive_seed(cfg.seed, "model"), ablation=cfg.ablation,
        encoder_cfg=cfg.encoder, align_cfg=cfg.align,
    )


def _restore(cfg: RunConfig, lm):
    """Model for eval/infer: rebuilt from the checkpoint's stored config when one is given."""
    if cfg.method not in TRAINABLE_METHODS:
        return _model_from_config(cfg, lm)
    if not cfg.checkpoint:
        raise UsageError(f"method {cfg.method!r} needs --checkpoint")
    _, meta = read_checkpoint(cfg.checkpoint)
    if meta.get("method") != cfg.method:
        raise CheckpointMismatch(f"checkpoint was trained for {meta.get('method')!r}, not {cfg.method!r}")
    saved = meta.get("config", {})
    rebuilt = dataclasses.replace(
        cfg,
        encoder=EncoderConfig(**saved["encoder"]) if "encoder" in saved else cfg.encoder,
        align=AlignConfig(**saved["align"]) if "align" in saved else cfg.align,
        ablation=AblationConfig(**saved["ablation"]) if "ablation" in saved else cfg.ablation,
    )
    model = _model_from_config(rebuilt, lm)
    load_checkpoint(model, cfg.checkpoint)
    return model


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out or "synthetic.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    spec = MotifSpec(kind=args.motif)
    if args.vulnerable_fraction is None:
        samples = synth_dataset(args.seed or 0, args.n, spec)
    else:
        samples = synth_imbalanced(args.seed or 0, args.n, args.vulnerable_fraction, spec)
    write_corpus(samples, out)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_prepare(args) -> int:
    """Split 70/15/15, drop oversized graphs from train/validation, balance every subset."""
    seed = args.seed or 0
    corpus = _corpus_file(args.corpus, "corpus.jsonl")
    samples = read_corpus(corpus, args.graphs)
    split = split_dataset(samples, derive_seed(seed, "split"))
    out = Path(args.out or "prepared")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": seed,
        "input_samples": len(samples),
        "limits": {"max_nodes": args.max_nodes, "max_edges": args.max_edges},
        "before_balancing": {},
        "excluded_oversized": {},
        "after_balancing": {},
    }
    for name, subset in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        manifest["before_balancing"][name] = len(subset)
        kept = list(subset)
        if name != "test":
            kept = filter_oversized(kept, args.max_nodes, args.max_edges)
        manifest["excluded_oversized"][name] = len(subset) - len(kept)
        balanced = undersample(kept, derive_seed(seed, f"undersample/{name}"))
        vulnerable = sum(s.label for s in balanced)
        manifest["after_balancing"][name] = {"vulnerable": vulnerable, "safe": len(balanced) - vulnerable}
        write_corpus(balanced, out / f"{name}.jsonl")
    manifest["excluded_total"] = sum(manifest["excluded_oversized"].values())
    _write_json(out / "manifest.json", manifest)
    print(json.dumps(manifest["before_balancing"]), "->", json.dumps(manifest["after_balancing"]))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if cfg.method not in TRAINABLE_METHODS:
        raise UsageError(f"method {cfg.method!r} has no trainable parameters")
    samples = read_corpus(_corpus_file(cfg.corpus, "train.jsonl"), cfg.graphs)
    torch.manual_seed(derive_seed(cfg.seed, "torch"))
    lm = load_lm(cfg.model)
    model = _model_from_config(cfg, lm)
    result = train(model, samples, cfg.train)
    out = Path(cfg.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.npz"
    snapshot = config_snapshot(cfg)
    save_checkpoint(model, checkpoint, snapshot, result.steps)
    result.write_trace(out / "loss_trace.csv")
    _write_json(out / "config.json", snapshot)
    print(f"{result.steps} steps, final loss {result.trace[-1][1]:.4f}; checkpoint {checkpoint}")
    return 0


def _eval_samples(cfg: RunConfig, lm):
    samples = read_corpus(_corpus_file(cfg.corpus, "test.jsonl"), cfg.graphs)
    if cfg.long_code:
        samples = evaluation.long_code_subset(samples, lm.tokenize)
    return samples


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    lm = load_lm(cfg.model)
    model = _restore(cfg, lm)
    samples = _eval_samples(cfg, lm)
    report, _ = evaluation.evaluate(model, samples, cfg.max_eval_tokens)
    payload = evaluation.report_json(report, cfg.method, cfg.model, len(samples), cfg.long_code)
    _write_json(Path(cfg.out or "report.json"), payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    cfg = resolve_config(args)
    lm = load_lm(cfg.model)
    model = _restore(cfg, lm)
    samples = _eval_samples(cfg, lm)
    out = Path(cfg.out or "predictions.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        for s in samples:
            label, margin = model.predict(s, cfg.max_eval_tokens)
            fh.write(json.dumps({"id": s.id, "prediction": label, "margin": margin}, sort_keys=True) + "\n")
    print(f"wrote {len(samples)} predictions to {out}")
    return 0


def cmd_bench(args) -> int:
    try:
        grid = evaluation.parse_grid(args.grid) if args.grid else evaluation.DEFAULT_GRID
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = evaluation.bench_alignment_scaling(grid, d_lm=args.d_lm, seed=args.seed or 0)
    out = Path(args.out or "bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_bench_csv(rows, out)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


# -- parser ----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, run: bool = True) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    if not run:
        return
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--config", help="JSON file of flat dotted keys, e.g. {\"train.learning_rate\": 1e-3}")
    p.add_argument("--model", help="'tiny' (default) or 'hf:<name-or-path>'")
    p.add_argument("--corpus")
    p.add_argument("--graphs", help="directory that graph file references are relative to")
    p.add_argument("--checkpoint")
    p.add_argument("--max-train-tokens", type=int)
    p.add_argument("--max-eval-tokens", type=int)
    p.add_argument("--long-code", action="store_true", help="evaluate on the 7%% longest samples only")
    p.add_argument("--ablate", action="append", choices=AblationConfig.__dataclass_fields__.keys())
    p.add_argument("--preset", choices=("full", "desk"),
                   help="training schedule; defaults to desk for the tiny model, full otherwise")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgp-tuning", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic graph-motif corpus")
    _common(p, run=False)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--motif", choices=("reaching_def", "positional"), default="reaching_def")
    p.add_argument("--vulnerable-fraction", type=float, help="class prior; default is exact vulnerable/safe twins")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="split, filter and balance a corpus")
    _common(p, run=False)
    p.add_argument("--corpus", required=True)
    p.add_argument("--graphs")
    p.add_argument("--max-nodes", type=int, default=300_000)
    p.add_argument("--max-edges", type=int, default=30_000)
    p.set_defaults(func=cmd_prepare)

    for name, func, text in (
        ("train", cmd_train, "tune a method and write checkpoint, loss trace and config"),
        ("eval", cmd_eval, "evaluate a method and write a metrics report"),
        ("infer", cmd_infer, "write per-sample predictions"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="alignment score-entry counts and timings over a size grid")
    _common(p, run=False)
    p.add_argument("--grid", help="comma-separated <nodes>x<tokens> cells")
    p.add_argument("--d-lm", type=int, default=64)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphFormatError, json.JSONDecodeError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
