import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cgp_tuning.embeddings import (
    OddDimension,
    OneHotTypeFeatures,
    PositionalEncoder,
    TypeEmbeddingTables,
    edge_feature_matrix,
    initial_node_embeddings,
    positional_embedding,
    positional_table,
)
from cgp_tuning.graph_model import CodeGraph, EdgeType, NodeType

from conftest import make_graph


def scalar_pe(i, d):
    # direct scalar evaluation, one element at a time
    out = []
    for c in range(d):
        j = c // 2
        angle = i / (10000.0 ** (2 * j / d))
        out.append(math.sin(angle) if c % 2 == 0 else math.cos(angle))
    return out


def test_pe_position_zero():
    assert positional_embedding(0, 4).tolist() == [0.0, 1.0, 0.0, 1.0]


def test_pe_hand_values_d4():
    # i=1, d=4: angles 1 and 1/100
    expected = [math.sin(1.0), math.cos(1.0), math.sin(0.01), math.cos(0.01)]
    np.testing.assert_allclose(positional_embedding(1, 4), expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("d", [4, 64])
@pytest.mark.parametrize("i", [0, 1, 2, 10, 999])
def test_pe_matches_scalar_oracle(i, d):
    assert np.max(np.abs(positional_embedding(i, d) - np.array(scalar_pe(i, d)))) < 1e-9


def test_pe_is_float64_and_bounded():
    table = positional_table(np.arange(50), 16)
    assert table.dtype == np.float64
    assert np.all(np.abs(table) <= 1.0)
    # each (sin, cos) pair lies on the unit circle
    np.testing.assert_allclose(table[:, 0::2] ** 2 + table[:, 1::2] ** 2, 1.0, atol=1e-12)


def test_pe_odd_dimension():
    with pytest.raises(OddDimension):
        positional_embedding(3, 5)
    with pytest.raises(OddDimension):
        PositionalEncoder(7)


@given(st.integers(1, 40), st.sampled_from([2, 8, 64]))
def test_pe_rows_distinct(n, d):
    table = positional_table(np.arange(n), d)
    assert len({tuple(np.round(r, 12)) for r in table}) == n


def test_encoder_matches_table():
    enc = PositionalEncoder(8)
    out = enc(5, dtype=torch.float64)
    assert out.dtype == torch.float64
    np.testing.assert_array_equal(out.numpy(), positional_table(np.arange(5), 8))
    assert enc(0).shape == (0, 8)


def test_h1_is_type_row_plus_pe(small_graph):
    torch.manual_seed(0)
    tables = TypeEmbeddingTables(16, 8)
    h1 = initial_node_embeddings(small_graph, tables)
    for i, node in enumerate(small_graph.nodes):
        expected = tables.node_type_table[int(node.node_type)] + torch.tensor(scalar_pe(i, 16), dtype=torch.float32)
        torch.testing.assert_close(h1[i], expected, rtol=0, atol=1e-6)


def test_h1_single_call_node():
    tables = TypeEmbeddingTables(8, 4)
    g = make_graph(["CALL"], [])
    h1 = initial_node_embeddings(g, tables)
    torch.testing.assert_close(h1[0], tables.node_type_table[NodeType.CALL] + torch.tensor(scalar_pe(0, 8)))


def test_h1_empty_graph():
    tables = TypeEmbeddingTables(8, 4)
    assert initial_node_embeddings(CodeGraph(), tables).shape == (0, 8)


def test_h1_ablation_flags(small_graph):
    tables = TypeEmbeddingTables(8, 4)
    only_pe = initial_node_embeddings(small_graph, tables, use_node_types=False)
    only_types = initial_node_embeddings(small_graph, tables, use_positional=False)
    torch.testing.assert_close(only_pe, PositionalEncoder(8)(small_graph.num_nodes))
    torch.testing.assert_close(only_types, tables.node_type_table[torch.as_tensor(small_graph.node_type_ids())])
    torch.testing.assert_close(only_pe + only_types, initial_node_embeddings(small_graph, tables))


def test_h1_gradient_reaches_only_used_rows(small_graph):
    tables = TypeEmbeddingTables(8, 4)
    initial_node_embeddings(small_graph, tables).sum().backward()
    used = set(small_graph.node_type_ids().tolist())
    for t in range(len(NodeType)):
        assert bool(tables.node_type_table.grad[t].abs().sum() > 0) == (t in used)


def test_table_shapes():
    tables = TypeEmbeddingTables(64)
    assert tables.node_type_table.shape == (17, 64)
    assert tables.edge_type_table.shape == (13, 128)
    with pytest.raises(OddDimension):
        TypeEmbeddingTables(63)


def test_edge_features_follow_edge_order(small_graph):
    tables = TypeEmbeddingTables(8, 4)
    feats = edge_feature_matrix(small_graph, tables)
    assert feats.shape == (small_graph.num_edges, 4)
    for row, edge in zip(feats, small_graph.edges):
        torch.testing.assert_close(row, tables.edge_type_table[int(edge.edge_type)])


def test_one_hot_baseline_features(small_graph):
    feats = OneHotTypeFeatures(8)
    edges = feats.edges(small_graph)
    assert edges.shape == (small_graph.num_edges, len(EdgeType))
    assert torch.all(edges.sum(1) == 1)
    assert int(edges[4].argmax()) == EdgeType.REACHING_DEF
    nodes = feats.nodes(small_graph)
    assert nodes.shape == (small_graph.num_nodes, 8)
    assert not feats.edges(CodeGraph()).numel()
