"""Metrics, long-code subsetting, inference timing, alignment scaling bench and ablations."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch

from .alignment import CgpAligner, GnpAligner, ProjectorAligner, ScoreCounter, count_alignment_cost
from .config import ABLATION_TOGGLES, AblationConfig, AlignConfig, TrainConfig
from .graph_model import Sample
from .lm import classify_constrained, forward_with_prompt
from .model import build_model
from .training import train


class LengthMismatch(ValueError):
    pass


@dataclass
class MetricsReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    tp: int
    fp: int
    tn: int
    fn: int
    total_inference_minutes: float = 0.0

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_row(self) -> dict:
        """Accuracy / Precision / Recall / F1-score, as in the results tables."""
        return {
            "accuracy": self.accuracy,
            "precision": self.precision_macro,
            "recall": self.recall_macro,
            "f1": self.f1_macro,
        }


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def macro_metrics(predictions: Sequence[bool], labels: Sequence[bool]) -> MetricsReport:
    """Accuracy and unweighted two-class macro precision/recall/F1 (0/0 counts as 0)."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise ValueError("need at least one prediction")
    tp = fp = tn = fn = 0
    for p, y in zip(predictions, labels):
        p, y = bool(p), bool(y)
        if p and y:
            tp += 1
        elif p:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    per_class = []
    # (true positives, predicted count, actual count) for the vulnerable and safe classes
    for hit, predicted, actual in ((tp, tp + fp, tp + fn), (tn, tn + fn, tn + fp)):
        precision = _ratio(hit, predicted)
        recall = _ratio(hit, actual)
        f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else 0.0
        per_class.append((precision, recall, f1))
    mean = lambda i: sum(c[i] for c in per_class) / 2  # noqa: E731
    return MetricsReport(_ratio(tp + tn, len(labels)), mean(0), mean(1), mean(2), tp, fp, tn, fn)


def long_code_subset(samples: Sequence[Sample], tokenize: Callable[[str], list], fraction: float = 0.07) -> list[Sample]:
    """The ceil(fraction * n) samples with the most code tokens; ties go to the smaller id.

    Returned in input order.
    """
    n = len(samples)
    keep = math.ceil(Fraction(str(fraction)) * n)
    ranked = sorted(range(n), key=lambda i: (-len(tokenize(samples[i].code)), samples[i].id))
    chosen = set(ranked[:keep])
    return [s for i, s in enumerate(samples) if i in chosen]


# -- inference ---------------------------------------------------------------------


@dataclass
class Prediction:
    id: str
    prediction: bool
    margin: float
    seconds: float = 0.0
    phases: dict[str, float] = field(default_factory=dict)


@torch.no_grad()
def timed_predict(model, sample: Sample, max_tokens: int = 16000) -> Prediction:
    """Predict one sample, timing prompt rendering, prompt construction and the LM pass."""
    model.eval()
    phases = {}
    t0 = time.perf_counter()
    bundle = model.render(sample, max_tokens)
    x_t = model.text_embeddings(bundle)
    t1 = time.perf_counter()
    z = model.prompt_rows(sample, x_t)
    t2 = time.perf_counter()
    logits = forward_with_prompt(model.lm, z, x_t)
    offset = 0 if z is None else z.shape[0]
    label, margin = classify_constrained(logits[offset + bundle.answer_position], model.true_id, model.false_id)
    t3 = time.perf_counter()
    phases["tokenize"] = t1 - t0
    phases["prompt"] = t2 - t1
    phases["lm"] = t3 - t2
    return Prediction(sample.id, label, margin, t3 - t0, phases)


@dataclass
class InferenceTiming:
    minutes: float
    predictions: list[Prediction]


def time_inference(model, subset: Sequence[Sample], max_tokens: int = 16000) -> InferenceTiming:
    """Wall-clock over the whole subset on one thread, in minutes, plus per-sample traces."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        start = time.perf_counter()
        preds = [timed_predict(model, s, max_tokens) for s in subset]
        elapsed = time.perf_counter() - start
    finally:
        torch.set_num_threads(threads)
    return InferenceTiming(elapsed / 60.0 if subset else 0.0, preds)


def evaluate(model, samples: Sequence[Sample], max_tokens: int = 16000) -> tuple[MetricsReport, list[Prediction]]:
    timing = time_inference(model, samples, max_tokens)
    report = macro_metrics([p.prediction for p in timing.predictions], [s.label for s in samples])
    report.total_inference_minutes = timing.minutes
    return report, timing.predictions


# -- alignment scaling bench -----------------------------------------------------------

DEFAULT_GRID = tuple((v, n) for v in (128, 256, 512) for n in (128, 256, 512))
BENCH_METHODS = ("cgp", "gnp", "projector")


@dataclass
class BenchRow:
    method: str
    num_nodes: int
    num_tokens: int
    num_prompts: int
    score_entries: int
    formula_entries: int
    wall_time_s: float
    token_doubling_ratio: float | None = None
    joint_doubling_ratio: float | None = None


def parse_grid(spec: str) -> list[tuple[int, int]]:
    """``"128x256,256x512"`` -> [(128, 256), (256, 512)] as (|V|_k, N_t) cells."""
    cells = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            v, n = part.lower().split("x")
            cell = (int(v), int(n))
        except ValueError:
            raise ValueError(f"bad grid cell {part!r}; expected <nodes>x<tokens>") from None
        if min(cell) < 1:
            raise ValueError(f"grid sizes must be positive: {part!r}")
        cells.append(cell)
    if not cells:
        raise ValueError("empty grid")
    return cells


def bench_alignment_scaling(
    grid: Iterable[tuple[int, int]] = DEFAULT_GRID,
    d_lm: int = 64,
    align_cfg: AlignConfig | None = None,
    seed: int = 0,
    methods: Sequence[str] = BENCH_METHODS,
) -> list[BenchRow]:
    """Run each aligner once per (|V|_k, N_t) cell, counting score entries and timing the pass."""
    cfg = align_cfg or AlignConfig()
    grid = list(grid)
    gen = torch.Generator().manual_seed(seed)
    rows = []
    for method in methods:
        torch.manual_seed(seed)
        aligner = {"cgp": CgpAligner, "gnp": GnpAligner, "projector": ProjectorAligner}[method](d_lm, cfg).eval()
        x_s = torch.randn(cfg.num_prompts, d_lm, generator=gen)
        for v, n in grid:
            h3 = torch.randn(v, d_lm, generator=gen)
            x_t = torch.randn(n, d_lm, generator=gen)
            with torch.no_grad(), ScoreCounter() as counter:
                start = time.perf_counter()
                if method == "cgp":
                    aligner(x_s, x_t, h3)
                elif method == "gnp":
                    aligner(h3, x_t)
                else:
                    aligner(h3)
                elapsed = time.perf_counter() - start
            expected = count_alignment_cost(method, v, n, cfg.num_prompts).score_entries
            rows.append(BenchRow(method, v, n, cfg.num_prompts, counter.total, expected, elapsed))
    index = {(r.method, r.num_nodes, r.num_tokens): r for r in rows}
    for r in rows:
        half_text = index.get((r.method, r.num_nodes, r.num_tokens // 2)) if r.num_tokens % 2 == 0 else None
        half_both = None
        if r.num_nodes % 2 == 0 and r.num_tokens % 2 == 0:
            half_both = index.get((r.method, r.num_nodes // 2, r.num_tokens // 2))
        if half_text is not None and half_text.score_entries:
            r.token_doubling_ratio = r.score_entries / half_text.score_entries
        if half_both is not None and half_both.score_entries:
            r.joint_doubling_ratio = r.score_entries / half_both.score_entries
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path: str | Path) -> None:
    names = list(asdict(rows[0]).keys()) if rows else [f for f in BenchRow.__dataclass_fields__]
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})


# -- ablations ----------------------------------------------------------------------------


def run_ablation(
    lm,
    train_samples: Sequence[Sample],
    eval_samples: Sequence[Sample],
    train_cfg: TrainConfig,
    toggles: Sequence[str] = ABLATION_TOGGLES,
    seed: int = 0,
    include_full: bool = True,
    max_eval_tokens: int = 16000,
) -> dict[str, MetricsReport]:
    """Train and evaluate CGP with one component removed at a time (plus the full model)."""
    configs = {}
    if include_full:
        configs["full"] = AblationConfig()
    for toggle in toggles:
        configs[toggle] = AblationConfig.only(toggle)
    results = {}
    for name, ablation in configs.items():
        model = build_model(lm, "cgp", seed=seed, ablation=ablation)
        train(model, train_samples, train_cfg)
        results[name], _ = evaluate(model, eval_samples, max_eval_tokens)
    return results


def report_json(report: MetricsReport, method: str, model: str, n_evaluated: int, long_code: bool = False) -> dict:
    return {
        "method": method,
        "model": model,
        **report.as_row(),
        "confusion": {"tp": report.tp, "fp": report.fp, "tn": report.tn, "fn": report.fn},
        "n_evaluated": n_evaluated,
        "long_code": long_code,
        "total_inference_minutes": report.total_inference_minutes,
    }
