"""Parameter registry, masked next-token loss, the tuning loop and a finite-difference checker."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig, derive_seed
from .graph_model import Sample

logger = logging.getLogger(__name__)

GROUPS = ("theta_s", "theta_t", "theta_g", "theta_c")
_PREFIX_GROUP = {
    "soft_prompt": "theta_s",
    "type_tables": "theta_t",
    "type_features": "theta_g",
    "encoder": "theta_g",
    "pooler": "theta_g",
    "aligner": "theta_c",
    "lm": "frozen",
}


class EmptyMask(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


class UnclassifiedParameter(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class ParameterRegistry:
    groups: dict[str, dict[str, torch.nn.Parameter]] = field(default_factory=dict)
    frozen: dict[str, torch.nn.Parameter] = field(default_factory=dict)

    def trainable(self) -> list[torch.nn.Parameter]:
        return [p for group in self.groups.values() for p in group.values()]

    def group_of(self, name: str) -> str:
        for group, params in self.groups.items():
            if name in params:
                return group
        if name in self.frozen:
            return "frozen"
        raise KeyError(name)

    def count(self, group: str) -> int:
        params = self.frozen if group == "frozen" else self.groups.get(group, {})
        return sum(p.numel() for p in params.values())


def trainable_parameters(model: torch.nn.Module) -> ParameterRegistry:
    """Partition every parameter of an assembled model into theta_s/t/g/c or frozen."""
    registry = ParameterRegistry()
    for name, param in model.named_parameters():
        group = _PREFIX_GROUP.get(name.split(".", 1)[0])
        if group is None:
            raise UnclassifiedParameter(name)
        if group == "frozen":
            if param.requires_grad:
                raise UnclassifiedParameter(f"{name} belongs to the frozen LM but requires grad")
            registry.frozen[name] = param
        else:
            registry.groups.setdefault(group, {})[name] = param
    return registry


def masked_cross_entropy(logits: torch.Tensor, target_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of ``target_ids[i]`` under ``logits[i]`` for i in ``mask``.

    Targets are already shifted: ``target_ids[i]`` is the token at position
    i + 1, which the logits at position i predict. Rows outside the mask
    never enter the loss.
    """
    positions = torch.nonzero(mask, as_tuple=False).flatten()
    if positions.numel() == 0:
        raise EmptyMask("no supervised positions")
    log_probs = torch.log_softmax(logits[positions], dim=-1)
    picked = log_probs.gather(1, target_ids[positions][:, None].to(torch.long))
    return -picked.mean()


def sample_loss(model, sample: Sample, max_tokens: int) -> torch.Tensor:
    logits, targets, mask = model.training_logits(sample, max_tokens)
    return masked_cross_entropy(logits, targets, mask)


@dataclass
class TrainResult:
    trace: list[tuple[int, float, float]]
    steps: int
    config: TrainConfig

    def write_trace(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "lr"])
            for step, loss, lr in self.trace:
                writer.writerow([step, repr(loss), repr(lr)])


def schedule_length(n_samples: int, cfg: TrainConfig) -> int:
    return math.ceil(n_samples / cfg.effective_batch) * cfg.epochs


def train(model, samples: Sequence[Sample], cfg: TrainConfig, loss_fn: Callable | None = None) -> TrainResult:
    """AdamW with linear decay to zero; one optimizer step per ``effective_batch`` samples.

    Each sample's loss is divided by the size of its accumulation group so that
    a group's gradient equals the gradient of its mean loss.
    """
    loss_fn = loss_fn or (lambda m, s: sample_loss(m, s, cfg.max_train_tokens))
    registry = trainable_parameters(model)
    params = registry.trainable()
    if not params:
        raise ValueError(f"method {getattr(model, 'method', '?')!r} has nothing to train")
    if not samples:
        raise ValueError("empty training set")
    total_steps = schedule_length(len(samples), cfg)
    optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: max(0.0, 1.0 - s / total_steps))
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    torch.manual_seed(derive_seed(cfg.seed, "dropout"))

    model.train()
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(samples))
        for start in range(0, len(order), cfg.effective_batch):
            group = order[start:start + cfg.effective_batch]
            optimizer.zero_grad(set_to_none=True)
            total = 0.0
            for idx in group:
                loss = loss_fn(model, samples[int(idx)])
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(
                        f"loss {float(loss.detach())} at epoch {epoch}, step {step}, sample {samples[int(idx)].id}"
                    )
                (loss / len(group)).backward()
                total += float(loss.detach())
            if cfg.max_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            lr = optimizer.param_groups[0]["lr"]
            optimizer.step()
            scheduler.step()
            trace.append((step, total / len(group), lr))
            step += 1
    model.eval()
    logger.info("trained %d steps, final loss %.4f", step, trace[-1][1])
    return TrainResult(trace, step, cfg)


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(model, path: str | Path, config: dict | None = None, step: int = 0) -> None:
    """Single .npz archive: trainable arrays under their parameter names, plus metadata."""
    registry = trainable_parameters(model)
    arrays = {}
    groups = {}
    for group, params in registry.groups.items():
        for name, p in params.items():
            arrays[name] = p.detach().cpu().numpy()
            groups[name] = group
    meta = {"method": model.method, "step": step, "groups": groups, "config": config or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return arrays, meta


def load_checkpoint(model, path: str | Path) -> dict:
    arrays, meta = read_checkpoint(path)
    if meta.get("method") != model.method:
        raise CheckpointMismatch(f"checkpoint was trained for {meta.get('method')!r}, model is {model.method!r}")
    registry = trainable_parameters(model)
    expected = {name for params in registry.groups.values() for name in params}
    if set(arrays) != expected:
        raise CheckpointMismatch(f"parameter names differ: {sorted(set(arrays) ^ expected)[:5]}")
    with torch.no_grad():
        for params in registry.groups.values():
            for name, p in params.items():
                if arrays[name].shape != tuple(p.shape):
                    raise CheckpointMismatch(f"{name}: shape {arrays[name].shape} vs {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arrays[name]).to(p.dtype))
    return meta


# -- gradient checking -------------------------------------------------------------


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-4,
    analytic: Sequence[torch.Tensor] | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |a - n| / max(|a|, |n|, floor) per element. Pass
    ``analytic`` to check a supplied gradient instead of autograd's.
    """
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = None
        loss_fn().backward()
        analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.view(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                ai = float(a_flat[i])
                rel = abs(ai - numeric) / max(abs(ai), abs(numeric), floor)
                worst = max(worst, rel)
    return worst


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
