"""Dataclass configs for every stage, plus flat dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

METHODS = ("cgp", "prompt", "projector", "gnp", "zero-shot", "grace")
TRAINABLE_METHODS = ("cgp", "prompt", "projector", "gnp")


@dataclass
class EncoderConfig:
    num_blocks: int = 4
    gat_heads: int = 8
    dropout: float = 0.1
    width: int = 64
    k: int = 4096

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.width % self.gat_heads:
            raise ValueError(f"width {self.width} not divisible by {self.gat_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class AlignConfig:
    num_prompts: int = 32
    heads: int = 32
    dropout: float = 0.1
    ffn_mult: int = 4
    d_te: int = 128


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 0.0
    micro_batch: int = 1
    grad_accum: int = 16
    epochs: int = 1
    max_train_tokens: int = 4096
    max_grad_norm: float | None = None
    seed: int = 0

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum


def desk_train_config(seed: int = 0) -> TrainConfig:
    """Schedule used for TinyLM runs on the synthetic corpora.

    A 64-wide random LM with a few hundred samples needs a larger step and
    several passes; everything else keeps the full-scale defaults.
    """
    return TrainConfig(learning_rate=3e-3, grad_accum=4, epochs=12, seed=seed)


ABLATION_TOGGLES = ("no_mha", "no_projector", "no_alignment", "no_node_types", "no_edge_types", "no_positional")


@dataclass(frozen=True)
class AblationConfig:
    no_mha: bool = False
    no_projector: bool = False
    no_alignment: bool = False
    no_node_types: bool = False
    no_edge_types: bool = False
    no_positional: bool = False

    @classmethod
    def only(cls, toggle: str) -> "AblationConfig":
        if toggle not in ABLATION_TOGGLES:
            raise ValueError(f"unknown ablation toggle {toggle!r}; choose from {ABLATION_TOGGLES}")
        return cls(**{toggle: True})

    def active(self) -> tuple[str, ...]:
        return tuple(t for t in ABLATION_TOGGLES if getattr(self, t))


@dataclass
class RunConfig:
    method: str = "cgp"
    model: str = "tiny"
    corpus: str | None = None
    graphs: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    seed: int = 0
    max_train_tokens: int = 4096
    max_eval_tokens: int = 16000
    long_code: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")


def apply_overrides(cfg: RunConfig, flat: Mapping[str, Any]) -> RunConfig:
    """Return a copy of ``cfg`` with flat dotted keys (``train.learning_rate``) applied."""
    cfg = dataclasses.replace(
        cfg,
        encoder=dataclasses.replace(cfg.encoder),
        align=dataclasses.replace(cfg.align),
        train=dataclasses.replace(cfg.train),
    )
    for key, value in flat.items():
        parts = key.split(".")
        target = cfg
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(getattr(target, part, None)):
                raise KeyError(f"unknown config section in {key!r}")
            target = getattr(target, part)
        name = parts[-1]
        if name not in {f.name for f in dataclasses.fields(target)}:
            raise KeyError(f"unknown config key {key!r}")
        if isinstance(target, AblationConfig):
            target = dataclasses.replace(target, **{name: bool(value)})
            cfg.ablation = target
            continue
        setattr(target, name, value)
    # re-run validation
    cfg.encoder.__post_init__()
    cfg.__post_init__()
    return cfg


def load_config_file(path: str | Path) -> dict[str, Any]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("config file must hold a flat JSON object")
    return data


def config_snapshot(cfg: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def derive_seed(root: int, name: str) -> int:
    """Named substream of the root seed."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
