"""Type-aware node/edge embeddings and fixed sinusoidal positional embeddings."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .graph_model import NUM_EDGE_TYPES, NUM_NODE_TYPES, CodeGraph


class OddDimension(ValueError):
    pass


def positional_embedding(i: int, d: int) -> np.ndarray:
    """Sinusoidal embedding of node position ``i`` (float64).

    Element 2j is sin(i * 10000^(-2j/d)) and element 2j+1 the matching cosine.
    """
    return positional_table(np.array([i]), d)[0]


def positional_table(positions: np.ndarray, d: int) -> np.ndarray:
    if d % 2:
        raise OddDimension(f"positional dimension must be even, got {d}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.size and positions.min() < 0:
        raise ValueError("positions must be non-negative")
    freqs = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    angles = positions[:, None] * freqs[None, :]
    out = np.empty((positions.shape[0], d), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


class PositionalEncoder:
    """Stateless; computed in 64-bit and cast to the requested dtype."""

    def __init__(self, d_pe: int):
        if d_pe % 2:
            raise OddDimension(f"positional dimension must be even, got {d_pe}")
        self.d_pe = d_pe

    def __call__(self, num_positions: int, dtype=torch.float32) -> torch.Tensor:
        table = positional_table(np.arange(num_positions), self.d_pe)
        return torch.from_numpy(table).to(dtype)


class TypeEmbeddingTables(nn.Module):
    """Trainable lookup tables for the 17 node types and 13 edge types.

    The node table shares the LM embedding width so that type and positional
    embeddings can be summed directly.
    """

    def __init__(self, d_lm: int, d_te: int = 128):
        super().__init__()
        if d_lm % 2:
            raise OddDimension(f"d_lm must be even to host positional embeddings, got {d_lm}")
        self.d_lm = d_lm
        self.d_te = d_te
        self.node_type_table = nn.Parameter(torch.randn(NUM_NODE_TYPES, d_lm))
        self.edge_type_table = nn.Parameter(torch.randn(NUM_EDGE_TYPES, d_te))


def _type_index(ids: np.ndarray, device) -> torch.Tensor:
    return torch.as_tensor(ids, dtype=torch.long, device=device)


def initial_node_embeddings(
    graph: CodeGraph,
    tables: TypeEmbeddingTables,
    use_node_types: bool = True,
    use_positional: bool = True,
) -> torch.Tensor:
    """H1 with row i = node_table[type(v_i)] + pe_i (|V| x d_lm).

    The two flags exist for ablations; with both on this is exactly the sum.
    """
    table = tables.node_type_table
    n = graph.num_nodes
    h = torch.zeros(n, tables.d_lm, dtype=table.dtype, device=table.device)
    if use_node_types:
        h = h + table[_type_index(graph.node_type_ids(), table.device)]
    if use_positional:
        h = h + PositionalEncoder(tables.d_lm)(n, dtype=table.dtype).to(table.device)
    return h


def edge_feature_matrix(graph: CodeGraph, tables: TypeEmbeddingTables) -> torch.Tensor:
    table = tables.edge_type_table
    return table[_type_index(graph.edge_type_ids(), table.device)]


class OneHotTypeFeatures(nn.Module):
    """Fixed one-hot type encodings for the baseline graph encoders.

    Baselines own no type tables; node types enter as one-hot vectors mapped to
    d_lm by a linear layer that belongs to the encoder, edge types as fixed
    one-hot rows.
    """

    def __init__(self, d_lm: int):
        super().__init__()
        self.d_lm = d_lm
        self.node_input = nn.Linear(NUM_NODE_TYPES, d_lm)
        self.d_te = NUM_EDGE_TYPES

    def nodes(self, graph: CodeGraph) -> torch.Tensor:
        w = self.node_input.weight
        onehot = torch.zeros(graph.num_nodes, NUM_NODE_TYPES, dtype=w.dtype, device=w.device)
        if graph.num_nodes:
            onehot[torch.arange(graph.num_nodes), _type_index(graph.node_type_ids(), w.device)] = 1.0
        pe = PositionalEncoder(self.d_lm)(graph.num_nodes, dtype=w.dtype).to(w.device)
        return self.node_input(onehot) + pe

    def edges(self, graph: CodeGraph) -> torch.Tensor:
        w = self.node_input.weight
        onehot = torch.zeros(graph.num_edges, NUM_EDGE_TYPES, dtype=w.dtype, device=w.device)
        if graph.num_edges:
            onehot[torch.arange(graph.num_edges), _type_index(graph.edge_type_ids(), w.device)] = 1.0
        return onehot
