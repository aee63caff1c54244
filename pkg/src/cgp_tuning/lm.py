"""Frozen causal LM boundary, prompt templates, soft-prompt injection and true/false decoding.

Any object with ``tokenize``, ``embed``, ``forward``, ``d_lm`` and
``vocab_size`` can stand in for the LM. ``TinyLM`` is a seeded, frozen,
randomly initialised 2-layer causal transformer that keeps everything
runnable on a laptop CPU; ``HuggingFaceLM`` wraps a transformers causal LM.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .embeddings import PositionalEncoder
from .graph_model import CodeGraph

PERSONA = "You are a highly skilled code auditor specializing in identifying vulnerabilities."
QUESTION = "Is this code vulnerable? Answer true or false."


class TokenBudgetExceeded(ValueError):
    pass


class MultiTokenLabel(ValueError):
    pass


class WidthMismatch(ValueError):
    pass


class FrozenLM(Protocol):
    d_lm: int
    vocab_size: int

    def tokenize(self, text: str) -> list[int]: ...

    def embed(self, ids: Sequence[int]) -> torch.Tensor: ...

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor: ...

    def parameters(self): ...


# -- tokenizer -------------------------------------------------------------------


class HashTokenizer:
    """Regex word/punctuation splitter with crc32 buckets and reserved label ids."""

    PATTERN = re.compile(r"\w+|[^\w\s]")
    RESERVED = {"<pad>": 0, "<bos>": 1, "true": 2, "false": 3}
    NUM_RESERVED = 8

    def __init__(self, vocab_size: int = 512):
        if vocab_size <= self.NUM_RESERVED:
            raise ValueError("vocabulary too small")
        self.vocab_size = vocab_size

    def token_id(self, token: str) -> int:
        if token in self.RESERVED:
            return self.RESERVED[token]
        return self.NUM_RESERVED + zlib.crc32(token.encode()) % (self.vocab_size - self.NUM_RESERVED)

    def __call__(self, text: str) -> list[int]:
        return [self.token_id(t) for t in self.PATTERN.findall(text)]


# -- TinyLM ----------------------------------------------------------------------


@dataclass(frozen=True)
class TinyLMConfig:
    vocab_size: int = 512
    d_lm: int = 64
    heads: int = 4
    layers: int = 2
    mlp_mult: int = 4
    seed: int = 0
    positions: str = "rotary"  # or "sinusoidal" (added to the input)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotary position mixing on (heads, n, hd) with interleaved pairs."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def rotary_tables(n: int, hd: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    freqs = torch.pow(10000.0, -torch.arange(0, hd, 2, dtype=torch.float64) / hd)
    angles = torch.arange(n, dtype=torch.float64)[:, None] * freqs[None, :]
    return torch.cos(angles).to(dtype), torch.sin(angles).to(dtype)


class _CausalBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_mult: int, rotary: bool = False):
        super().__init__()
        self.heads = heads
        self.rotary = rotary
        self.ln1 = nn.RMSNorm(d)
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.ln2 = nn.RMSNorm(d)
        self.fc1 = nn.Linear(d, mlp_mult * d)
        self.fc2 = nn.Linear(mlp_mult * d, d)

    def forward(self, x):
        n, d = x.shape
        hd = d // self.heads
        h = self.ln1(x)
        q = self.q_proj(h).view(n, self.heads, hd).transpose(0, 1)
        k = self.k_proj(h).view(n, self.heads, hd).transpose(0, 1)
        v = self.v_proj(h).view(n, self.heads, hd).transpose(0, 1)
        if self.rotary:
            cos, sin = rotary_tables(n, hd, x.dtype)
            q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        scores = q @ k.transpose(1, 2) / hd**0.5
        future = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), diagonal=1)
        attn = torch.softmax(scores.masked_fill(future, float("-inf")), dim=-1)
        x = x + self.out_proj((attn @ v).transpose(0, 1).reshape(n, d))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class TinyLM(nn.Module):
    """Seeded random causal transformer, frozen at construction."""

    def __init__(self, cfg: TinyLMConfig | None = None):
        super().__init__()
        cfg = cfg or TinyLMConfig()
        self.cfg = cfg
        self.d_lm = cfg.d_lm
        self.vocab_size = cfg.vocab_size
        self.tokenizer = HashTokenizer(cfg.vocab_size)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.d_lm)
            self.blocks = nn.ModuleList(
                _CausalBlock(cfg.d_lm, cfg.heads, cfg.mlp_mult, cfg.positions == "rotary") for _ in range(cfg.layers)
            )
            self.ln_f = nn.RMSNorm(cfg.d_lm)
            self.lm_head = nn.Linear(cfg.d_lm, cfg.vocab_size, bias=False)
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    # unit-variance activations everywhere, so attention actually mixes positions
                    nn.init.normal_(module.weight, std=module.in_features**-0.5)
                    if module.bias is not None:
                        nn.init.zeros_(module.bias)
            # small-norm token embeddings, so block outputs rather than the raw
            # token dominate the residual stream (and soft prompts can steer it)
            nn.init.normal_(self.token_embedding.weight, std=cfg.d_lm**-0.5)
        if cfg.positions not in ("rotary", "sinusoidal"):
            raise ValueError(f"unknown position scheme {cfg.positions!r}")
        self.positions = PositionalEncoder(cfg.d_lm) if cfg.positions == "sinusoidal" else None
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # no stochastic layers; stay in eval regardless of the parent module
        return super().train(False)

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer(text)

    def embed(self, ids: Sequence[int]) -> torch.Tensor:
        idx = torch.as_tensor(list(ids), dtype=torch.long)
        return self.token_embedding(idx)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        x = embeddings
        if self.positions is not None:
            x = x + self.positions(embeddings.shape[0], dtype=embeddings.dtype)
        for block in self.blocks:
            x = block(x)
        return self.lm_head(self.ln_f(x))

    def adapter_targets(self) -> dict[str, nn.Linear]:
        """Query/value projections, where a low-rank adapter would attach."""
        targets = {}
        for i, block in enumerate(self.blocks):
            targets[f"blocks.{i}.q_proj"] = block.q_proj
            targets[f"blocks.{i}.v_proj"] = block.v_proj
        return targets


class HuggingFaceLM(nn.Module):
    """Adapter for a transformers causal LM plus its tokenizer (weights frozen)."""

    def __init__(self, model, tokenizer):
        super().__init__()
        self.model = model
        self.tokenizer = tokenizer
        self.embedding = model.get_input_embeddings()
        self.d_lm = int(self.embedding.weight.shape[1])
        self.vocab_size = int(self.embedding.weight.shape[0])
        self.model.requires_grad_(False)
        self.model.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def tokenize(self, text: str) -> list[int]:
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def embed(self, ids):
        return self.embedding(torch.as_tensor(list(ids), dtype=torch.long))

    def forward(self, embeddings):
        return self.model(inputs_embeds=embeddings[None]).logits[0]


def label_token_ids(lm: FrozenLM, true_text: str = "true", false_text: str = "false") -> tuple[int, int]:
    true_ids, false_ids = lm.tokenize(true_text), lm.tokenize(false_text)
    if len(true_ids) != 1 or len(false_ids) != 1:
        raise MultiTokenLabel(f"labels tokenize to {true_ids} / {false_ids}; single tokens required")
    return true_ids[0], false_ids[0]


# -- prompts ---------------------------------------------------------------------


@dataclass(frozen=True)
class PromptBundle:
    """A rendered prompt. The answer logit is read at ``answer_position`` (text coordinates)."""

    text: str
    token_ids: tuple[int, ...]
    answer_position: int
    truncated: bool = False

    @property
    def num_tokens(self) -> int:
        return len(self.token_ids)

    def supervised_positions(self, num_prompts: int, num_answer_tokens: int = 1) -> list[int]:
        """Logit rows T in [Z; text; answer] whose next token is an answer token."""
        start = num_prompts + self.num_tokens - 1
        return list(range(start, start + num_answer_tokens))


def _template(code: str, context: str = "") -> str:
    context_block = f"Code property graph:\n{context}\n" if context else ""
    return f"<system>\n{PERSONA}\n<user>\n{context_block}```\n{code}\n```\n{QUESTION}\n<assistant>\n"


def render_prompt(code: str, tokenize, max_tokens: int = 16000, context: str = "") -> PromptBundle:
    """Render the canonical message template.

    The budget covers the text tokens plus one reserved answer slot. When over
    budget the code is cut from its tail first, then context lines from theirs;
    persona, question and answer slot are never touched.
    """
    if not code:
        raise ValueError("code must be non-empty")
    fits = lambda c, ctx: len(tokenize(_template(c, ctx))) + 1 <= max_tokens  # noqa: E731
    truncated = False
    if not fits(code, context):
        truncated = True
        if fits("", context):
            code = code[: _longest_prefix(code, lambda c: fits(c, context))]
        else:
            code = ""
            lines = context.split("\n")
            keep = _longest_prefix(lines, lambda ls: fits("", "\n".join(ls)))
            if keep == 0 and not fits("", ""):
                raise TokenBudgetExceeded(f"template alone exceeds {max_tokens} tokens")
            context = "\n".join(lines[:keep])
    text = _template(code, context)
    ids = tuple(tokenize(text))
    return PromptBundle(text, ids, len(ids) - 1, truncated)


def _longest_prefix(seq, ok) -> int:
    lo, hi = 0, len(seq)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if ok(seq[:mid]):
            lo = mid
        else:
            hi = mid - 1
    return lo


def render_grace_context(graph: CodeGraph) -> str:
    """One line per node, then one per edge, describing the graph in plain text."""
    lines = []
    for i, node in enumerate(graph.nodes):
        suffix = f": {node.code}" if node.code else ""
        lines.append(f"Node {i} is a {node.node_type.name}{suffix}")
    for e in graph.edges:
        lines.append(f"Node {e.src} -{e.edge_type.name}-> Node {e.dst}")
    return "\n".join(lines)


def render_grace_prompt(graph: CodeGraph, code: str, tokenize, max_tokens: int = 16000) -> PromptBundle:
    return render_prompt(code, tokenize, max_tokens, context=render_grace_context(graph))


# -- injection and decoding -------------------------------------------------------


def forward_with_prompt(lm: FrozenLM, z: torch.Tensor | None, x_t: torch.Tensor) -> torch.Tensor:
    """Logits of the frozen LM over the row-concatenation [Z; X_t]."""
    if x_t.ndim != 2 or x_t.shape[1] != lm.d_lm:
        raise WidthMismatch(f"text embeddings have shape {tuple(x_t.shape)}, expected (*, {lm.d_lm})")
    if z is None:
        return lm.forward(x_t)
    if z.ndim != 2 or z.shape[1] != lm.d_lm:
        raise WidthMismatch(f"prompt embeddings have shape {tuple(z.shape)}, expected (*, {lm.d_lm})")
    return lm.forward(torch.cat([z.to(x_t.dtype), x_t], dim=0))


def classify_constrained(logits_at_answer: torch.Tensor, true_id: int, false_id: int) -> tuple[bool, float]:
    """Compare the two label logits; an exact tie counts as not vulnerable."""
    margin = float(logits_at_answer[true_id] - logits_at_answer[false_id])
    return margin > 0.0, margin
