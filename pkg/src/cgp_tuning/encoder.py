"""GAT basic blocks with residual links, followed by score-and-select pooling."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig
from .graph_model import CodeGraph


class ShapeMismatch(ValueError):
    pass


def _with_self_loops(edge_index: torch.Tensor, n: int) -> torch.Tensor:
    loops = torch.arange(n, device=edge_index.device).repeat(2, 1)
    return torch.cat([edge_index, loops], dim=1)


def segment_softmax(logits: torch.Tensor, index: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of ``logits`` (E x H) within groups sharing the same ``index``."""
    heads = logits.shape[1]
    seg_max = torch.full((num_segments, heads), float("-inf"), dtype=logits.dtype, device=logits.device)
    seg_max = seg_max.scatter_reduce(0, index[:, None].expand(-1, heads), logits.detach(), reduce="amax")
    exp = torch.exp(logits - seg_max[index])
    denom = torch.zeros(num_segments, heads, dtype=logits.dtype, device=logits.device).index_add(0, index, exp)
    return exp / denom[index]


class GATLayer(nn.Module):
    """Multi-head graph attention with edge features in the attention logits.

    For the edge j -> i the head-h logit is
    LeakyReLU(a_src . W h_j + a_dst . W h_i + a_edge . W_e x_e); heads are
    concatenated and merged back to ``width``. Every node gets a self-loop whose
    edge-feature term is zero.
    """

    def __init__(self, width: int, heads: int, d_edge: int | None, negative_slope: float = 0.2):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.width, self.heads, self.head_dim = width, heads, width // heads
        self.negative_slope = negative_slope
        self.lin = nn.Linear(width, width, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, self.head_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, self.head_dim))
        nn.init.xavier_uniform_(self.att_src)
        nn.init.xavier_uniform_(self.att_dst)
        if d_edge:
            self.lin_edge = nn.Linear(d_edge, width, bias=False)
            self.att_edge = nn.Parameter(torch.empty(heads, self.head_dim))
            nn.init.xavier_uniform_(self.att_edge)
        else:
            self.lin_edge = None
        self.merge = nn.Linear(width, width)

    def attention_logits(self, x, edge_index, edge_feats):
        src, dst = edge_index
        logits = (x * self.att_src).sum(-1)[src] + (x * self.att_dst).sum(-1)[dst]
        num_real = 0 if edge_feats is None else edge_feats.shape[0]
        if self.lin_edge is not None and num_real:
            e = self.lin_edge(edge_feats).view(num_real, self.heads, self.head_dim)
            edge_term = (e * self.att_edge).sum(-1)
            logits = logits + torch.cat([edge_term, logits.new_zeros(logits.shape[0] - num_real, self.heads)])
        return F.leaky_relu(logits, self.negative_slope)

    def forward(self, h: torch.Tensor, edge_index: torch.Tensor, edge_feats: torch.Tensor | None = None):
        n = h.shape[0]
        x = self.lin(h).view(n, self.heads, self.head_dim)
        full_index = _with_self_loops(edge_index, n)
        alpha = segment_softmax(self.attention_logits(x, full_index, edge_feats), full_index[1], n)
        src, dst = full_index
        out = torch.zeros_like(x).index_add(0, dst, alpha[..., None] * x[src])
        return self.merge(out.reshape(n, self.width))


class BasicBlock(nn.Module):
    """Dropout(ReLU(LayerNorm(GAT(H, edge features))))."""

    def __init__(self, width: int, heads: int, d_edge: int | None, dropout: float):
        super().__init__()
        self.gat = GATLayer(width, heads, d_edge)
        self.norm = nn.LayerNorm(width)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h, edge_index, edge_feats=None):
        return self.dropout(F.relu(self.norm(self.gat(h, edge_index, edge_feats))))


class EncoderStack(nn.Module):
    def __init__(self, cfg: EncoderConfig, d_edge: int | None):
        super().__init__()
        self.cfg = cfg
        self.d_edge = d_edge
        self.blocks = nn.ModuleList(
            BasicBlock(cfg.width, cfg.gat_heads, d_edge, cfg.dropout) for _ in range(cfg.num_blocks)
        )

    def forward(self, h1: torch.Tensor, graph: CodeGraph, edge_feats: torch.Tensor | None = None) -> torch.Tensor:
        if h1.ndim != 2 or h1.shape != (graph.num_nodes, self.cfg.width):
            raise ShapeMismatch(f"H1 has shape {tuple(h1.shape)}, expected ({graph.num_nodes}, {self.cfg.width})")
        if edge_feats is not None and edge_feats.shape[0] != graph.num_edges:
            raise ShapeMismatch(f"{edge_feats.shape[0]} edge feature rows for {graph.num_edges} edges")
        edge_index = torch.as_tensor(graph.edge_index(), dtype=torch.long, device=h1.device)
        h = h1
        for block in self.blocks:
            h = block(h, edge_index, edge_feats) + h
        return h


def basic_block(block: BasicBlock, h, graph: CodeGraph, edge_feats, training: bool) -> torch.Tensor:
    """Functional form: run one block with dropout active only when ``training``."""
    if edge_feats is not None and edge_feats.shape[0] != graph.num_edges:
        raise ShapeMismatch(f"{edge_feats.shape[0]} edge feature rows for {graph.num_edges} edges")
    if h.shape[0] != graph.num_nodes:
        raise ShapeMismatch(f"{h.shape[0]} node rows for {graph.num_nodes} nodes")
    was_training = block.training
    block.train(training)
    try:
        edge_index = torch.as_tensor(graph.edge_index(), dtype=torch.long, device=h.device)
        return block(h, edge_index, edge_feats)
    finally:
        block.train(was_training)


@dataclass
class PooledGraph:
    h3: torch.Tensor
    selected_indices: tuple[int, ...]
    scores: torch.Tensor


class TopKPooler(nn.Module):
    """Learnable projection score per node; keep the top min(k, |V|) rows gated by tanh(score).

    Ties favour the lower node index; retained rows keep their original order.
    """

    def __init__(self, width: int, k: int = 4096):
        super().__init__()
        self.k = k
        self.weight = nn.Parameter(torch.empty(width))
        nn.init.uniform_(self.weight, -1.0 / width**0.5, 1.0 / width**0.5)

    def forward(self, h2: torch.Tensor) -> PooledGraph:
        scores = h2 @ self.weight / self.weight.norm()
        keep = min(self.k, h2.shape[0])
        order = torch.sort(scores.detach(), descending=True, stable=True).indices[:keep]
        selected = torch.sort(order).values
        h3 = h2[selected] * torch.tanh(scores[selected])[:, None]
        return PooledGraph(h3, tuple(int(i) for i in selected), scores)


def pool(pooler: TopKPooler, h2: torch.Tensor, k: int | None = None) -> PooledGraph:
    if k is None:
        return pooler(h2)
    saved = pooler.k
    pooler.k = k
    try:
        return pooler(h2)
    finally:
        pooler.k = saved
