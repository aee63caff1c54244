import pytest
import torch

from cgp_tuning.graph_model import CodeGraph, Edge, EdgeType, Node, NodeType, Sample
from cgp_tuning.lm import TinyLM

torch.set_num_threads(1)


def make_graph(types, edges):
    """types: sequence of NodeType names; edges: (src, dst, EdgeType name) triples."""
    nodes = tuple(Node(f"n{i}", NodeType[t]) for i, t in enumerate(types))
    return CodeGraph(nodes, tuple(Edge(s, d, EdgeType[t]) for s, d, t in edges))


def make_sample(sid="s0", label=True, code="int f(int x) { return x; }", graph=None):
    graph = graph or make_graph(["METHOD", "IDENTIFIER", "CALL"], [(0, 1, "AST"), (2, 1, "REACHING_DEF")])
    return Sample(sid, code, label, graph)


@pytest.fixture(scope="session")
def tiny_lm():
    return TinyLM()


@pytest.fixture
def small_graph():
    return make_graph(
        ["METHOD", "BLOCK", "CALL", "IDENTIFIER", "LITERAL"],
        [(0, 1, "AST"), (1, 2, "AST"), (2, 3, "ARGUMENT"), (2, 4, "ARGUMENT"), (3, 2, "REACHING_DEF"), (1, 4, "CFG")],
    )


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line[1])
