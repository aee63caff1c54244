"""Cross-modal aligners that turn pooled graph features into LM-space prompt rows.

Three strategies live here:

* ``CgpAligner``: soft prompts query the text, the result queries the graph,
  then a feed-forward projector. Attention cost grows with N_s * (N_t + |V|_k).
* ``ProjectorAligner``: mean-pool nodes and project (one output row, no text).
* ``GnpAligner``: node self-attention, node-to-text cross-attention, mean-pool,
  project. Cost grows with |V|^2 + |V| * N_t.

Every attention call reports its score-matrix size to any active
``ScoreCounter``, which is how the cost formulas are checked against real
forward passes.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import AlignConfig


class WidthMismatch(ValueError):
    pass


class EmptyText(ValueError):
    pass


class EmptyGraph(ValueError):
    pass


_active_counters: contextvars.ContextVar[tuple["ScoreCounter", ...]] = contextvars.ContextVar(
    "score_counters", default=()
)


@dataclass
class ScoreCounter:
    """Context manager accumulating attention score-matrix entries per stage."""

    stages: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.stages.values())

    def record(self, stage: str, num_queries: int, num_keys: int) -> None:
        self.stages[stage] = self.stages.get(stage, 0) + num_queries * num_keys

    def __enter__(self):
        self._token = _active_counters.set(_active_counters.get() + (self,))
        return self

    def __exit__(self, *exc):
        _active_counters.reset(self._token)
        return False


def _record(stage: str, nq: int, nk: int) -> None:
    for counter in _active_counters.get():
        counter.record(stage, nq, nk)


def multi_head_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    merge: nn.Module | None = None,
    dropout: float = 0.0,
    training: bool = False,
    stage: str = "attention",
) -> torch.Tensor:
    """Scaled dot-product attention over already-projected q (Nq x d), k, v (Nk x d)."""
    nq, d = q.shape
    nk = k.shape[0]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    hd = d // heads
    _record(stage, nq, nk)
    qh = q.view(nq, heads, hd).transpose(0, 1)
    kh = k.view(nk, heads, hd).transpose(0, 1)
    vh = v.view(nk, heads, hd).transpose(0, 1)
    weights = torch.softmax(qh @ kh.transpose(1, 2) / hd**0.5, dim=-1)
    weights = F.dropout(weights, dropout, training)
    out = (weights @ vh).transpose(0, 1).reshape(nq, d)
    return merge(out) if merge is not None else out


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, d_out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d_out or d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def _lecun_init(*layers: nn.Linear) -> None:
    # normal(0, 1/fan_in): attention logits start with unit scale, not near-zero
    for layer in layers:
        nn.init.normal_(layer.weight, std=layer.in_features**-0.5)


def _check_width(d: int, **tensors):
    for name, t in tensors.items():
        if t.ndim != 2 or t.shape[1] != d:
            raise WidthMismatch(f"{name} has shape {tuple(t.shape)}, expected (*, {d})")


class CgpAligner(nn.Module):
    """Two attention stages sharing W_Q/W_K/W_V, each with its own merge map, then an FFN."""

    def __init__(self, d_lm: int, cfg: AlignConfig | None = None):
        super().__init__()
        cfg = cfg or AlignConfig()
        if d_lm % cfg.heads:
            raise ValueError(f"d_lm {d_lm} not divisible by {cfg.heads} heads")
        self.d_lm, self.heads, self.dropout = d_lm, cfg.heads, cfg.dropout
        self.w_q = nn.Linear(d_lm, d_lm, bias=False)
        self.w_k = nn.Linear(d_lm, d_lm, bias=False)
        self.w_v = nn.Linear(d_lm, d_lm, bias=False)
        self.merge_text = nn.Linear(d_lm, d_lm)
        self.merge_graph = nn.Linear(d_lm, d_lm)
        self.ffn = FeedForward(d_lm, cfg.ffn_mult * d_lm)
        _lecun_init(self.w_q, self.w_k, self.w_v)

    def _mha(self, queries, keys, merge, stage):
        return multi_head_attention(
            self.w_q(queries), self.w_k(keys), self.w_v(keys), self.heads,
            merge, self.dropout, self.training, stage,
        )

    def attend(self, x_s, x_t, h3):
        h4 = self._mha(x_s, x_t, self.merge_text, "text")
        return self._mha(h4, h3, self.merge_graph, "graph")

    def forward(self, x_s, x_t, h3, use_mha: bool = True, use_projector: bool = True):
        _check_width(self.d_lm, x_s=x_s, x_t=x_t, h3=h3)
        if x_t.shape[0] == 0:
            raise EmptyText("text features are empty")
        if h3.shape[0] == 0:
            raise EmptyGraph("pooled graph has no nodes")
        h = self.attend(x_s, x_t, h3) if use_mha else x_s
        return self.ffn(h) if use_projector else h


def cgp_align(aligner: CgpAligner, x_s, x_t, h3):
    return aligner(x_s, x_t, h3)


class ProjectorAligner(nn.Module):
    def __init__(self, d_lm: int, cfg: AlignConfig | None = None):
        super().__init__()
        cfg = cfg or AlignConfig()
        self.d_lm = d_lm
        self.projector = FeedForward(d_lm, cfg.ffn_mult * d_lm)

    def forward(self, h3, x_t=None):
        _check_width(self.d_lm, h3=h3)
        if h3.shape[0] == 0:
            raise EmptyGraph("pooled graph has no nodes")
        return self.projector(h3.mean(dim=0, keepdim=True))


def projector_align(aligner: ProjectorAligner, h3):
    return aligner(h3)


class GnpAligner(nn.Module):
    """Node self-attention, then node-queried cross-attention over the text, mean-pool, project."""

    def __init__(self, d_lm: int, cfg: AlignConfig | None = None):
        super().__init__()
        cfg = cfg or AlignConfig()
        self.d_lm, self.heads, self.dropout = d_lm, cfg.heads, cfg.dropout
        self.self_q = nn.Linear(d_lm, d_lm, bias=False)
        self.self_k = nn.Linear(d_lm, d_lm, bias=False)
        self.self_v = nn.Linear(d_lm, d_lm, bias=False)
        self.self_merge = nn.Linear(d_lm, d_lm)
        self.cross_q = nn.Linear(d_lm, d_lm, bias=False)
        self.cross_k = nn.Linear(d_lm, d_lm, bias=False)
        self.cross_v = nn.Linear(d_lm, d_lm, bias=False)
        self.cross_merge = nn.Linear(d_lm, d_lm)
        self.projector = FeedForward(d_lm, cfg.ffn_mult * d_lm)
        _lecun_init(self.self_q, self.self_k, self.self_v, self.cross_q, self.cross_k, self.cross_v)

    def forward(self, h3, x_t):
        _check_width(self.d_lm, h3=h3, x_t=x_t)
        if h3.shape[0] == 0:
            raise EmptyGraph("pooled graph has no nodes")
        if x_t.shape[0] == 0:
            raise EmptyText("text features are empty")
        significance = multi_head_attention(
            self.self_q(h3), self.self_k(h3), self.self_v(h3), self.heads,
            self.self_merge, self.dropout, self.training, "self",
        )
        aligned = multi_head_attention(
            self.cross_q(significance), self.cross_k(x_t), self.cross_v(x_t), self.heads,
            self.cross_merge, self.dropout, self.training, "cross",
        )
        return self.projector(aligned.mean(dim=0, keepdim=True))


def gnp_align(aligner: GnpAligner, h3, x_t):
    return aligner(h3, x_t)


@dataclass(frozen=True)
class CostReport:
    method: str
    score_entries: int
    projector_rows: int
    stages: dict[str, int] = field(default_factory=dict)


def count_alignment_cost(method: str, num_nodes: int, num_tokens: int, num_prompts: int = 32) -> CostReport:
    """Exact attention score-matrix entries for one alignment forward pass.

    ``num_nodes`` is |V|_k for cgp and projector and |V| for gnp (the pooled
    node set is what the aligner sees in every case).
    """
    if min(num_nodes, num_tokens, num_prompts) < 0:
        raise ValueError("sizes must be non-negative")
    if method == "cgp":
        stages = {"text": num_prompts * num_tokens, "graph": num_prompts * num_nodes}
        rows = num_prompts
    elif method == "gnp":
        stages = {"self": num_nodes * num_nodes, "cross": num_nodes * num_tokens}
        rows = 1
    elif method == "projector":
        stages = {}
        rows = 1
    else:
        raise ValueError(f"no alignment cost model for method {method!r}")
    return CostReport(method, sum(stages.values()), rows, stages)
