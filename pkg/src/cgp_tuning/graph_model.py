"""Code property graph data model, interchange ingestion and dataset preparation.

Graphs arrive as JSON documents exported from Joern (one per sample)::

    {"nodes": [{"id": "n0", "type": "CALL", "code": "memcpy(buf, src, n)"}, ...],
     "edges": [{"src": "n0", "dst": "n1", "type": "ARGUMENT"}, ...]}

Node position in ``nodes`` is the index used by the positional embeddings.
"""

from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class NodeType(enum.IntEnum):
    CONTROL_STRUCTURE = 0
    METHOD = 1
    METHOD_REF = 2
    METHOD_RETURN = 3
    METHOD_PARAMETER_IN = 4
    METHOD_PARAMETER_OUT = 5
    IDENTIFIER = 6
    LOCAL = 7
    FIELD_IDENTIFIER = 8
    CALL = 9
    BLOCK = 10
    RETURN = 11
    LITERAL = 12
    TYPE_DECL = 13
    MODIFIER = 14
    JUMP_TARGET = 15
    UNKNOWN = 16


class EdgeType(enum.IntEnum):
    AST = 0
    CONTAINS = 1
    CFG = 2
    DOMINATE = 3
    POST_DOMINATE = 4
    CDG = 5
    REACHING_DEF = 6
    CALL = 7
    ARGUMENT = 8
    RECEIVER = 9
    REF = 10
    PARAMETER_LINK = 11
    CONDITION = 12


NUM_NODE_TYPES = len(NodeType)
NUM_EDGE_TYPES = len(EdgeType)


class GraphFormatError(ValueError):
    """Malformed graph document."""


class UnknownNodeType(GraphFormatError):
    pass


class UnknownEdgeType(GraphFormatError):
    pass


class DanglingEdge(GraphFormatError):
    pass


class DuplicateNodeId(GraphFormatError):
    pass


class TooFewSamples(ValueError):
    pass


class ImbalanceWarning(UserWarning):
    """Under-sampling could not produce a balanced subset."""


@dataclass(frozen=True)
class Node:
    node_id: str
    node_type: NodeType
    code: str | None = None


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    edge_type: EdgeType


@dataclass(frozen=True)
class CodeGraph:
    nodes: tuple[Node, ...] = ()
    edges: tuple[Edge, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        seen = set()
        for node in self.nodes:
            if node.node_id in seen:
                raise DuplicateNodeId(node.node_id)
            seen.add(node.node_id)
        n = len(self.nodes)
        for edge in self.edges:
            if not (0 <= edge.src < n and 0 <= edge.dst < n):
                raise DanglingEdge(f"edge {edge.src}->{edge.dst} outside [0, {n})")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def node_type_ids(self) -> np.ndarray:
        return np.array([int(v.node_type) for v in self.nodes], dtype=np.int64)

    def edge_type_ids(self) -> np.ndarray:
        return np.array([int(e.edge_type) for e in self.edges], dtype=np.int64)

    def edge_index(self) -> np.ndarray:
        """2 x |E| array of (src, dst) node positions."""
        if not self.edges:
            return np.zeros((2, 0), dtype=np.int64)
        return np.array([[e.src for e in self.edges], [e.dst for e in self.edges]], dtype=np.int64)


@dataclass(frozen=True)
class Sample:
    id: str
    code: str
    label: bool
    graph: CodeGraph
    provenance: Mapping[str, Any] | None = None


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[Sample, ...]
    validation: tuple[Sample, ...]
    test: tuple[Sample, ...]
    seed: int


def _resolve(enum_cls, name, error_cls):
    try:
        return enum_cls[name]
    except (KeyError, TypeError):
        raise error_cls(f"{name!r} is not a known {enum_cls.__name__}") from None


def parse_graph(document: Mapping[str, Any] | str) -> CodeGraph:
    """Build a CodeGraph from an interchange document (mapping or JSON text).

    Type names must belong to the closed Joern vocabularies; anything else is
    rejected instead of being mapped to UNKNOWN.
    """
    if isinstance(document, str):
        document = json.loads(document)
    if not isinstance(document, Mapping):
        raise GraphFormatError("graph document must be an object")
    raw_nodes = document.get("nodes", [])
    raw_edges = document.get("edges", [])
    if not isinstance(raw_nodes, list) or not isinstance(raw_edges, list):
        raise GraphFormatError("'nodes' and 'edges' must be lists")

    nodes = []
    index: dict[str, int] = {}
    for raw in raw_nodes:
        try:
            node_id = str(raw["id"])
            type_name = raw["type"]
        except (KeyError, TypeError):
            raise GraphFormatError(f"node entry missing id/type: {raw!r}") from None
        if node_id in index:
            raise DuplicateNodeId(node_id)
        index[node_id] = len(nodes)
        nodes.append(Node(node_id, _resolve(NodeType, type_name, UnknownNodeType), raw.get("code")))

    edges = []
    for raw in raw_edges:
        try:
            src, dst, type_name = str(raw["src"]), str(raw["dst"]), raw["type"]
        except (KeyError, TypeError):
            raise GraphFormatError(f"edge entry missing src/dst/type: {raw!r}") from None
        for endpoint in (src, dst):
            if endpoint not in index:
                raise DanglingEdge(f"edge endpoint {endpoint!r} is not a declared node")
        edges.append(Edge(index[src], index[dst], _resolve(EdgeType, type_name, UnknownEdgeType)))
    return CodeGraph(tuple(nodes), tuple(edges))


def serialize_graph(graph: CodeGraph) -> dict[str, Any]:
    nodes = []
    for node in graph.nodes:
        entry: dict[str, Any] = {"id": node.node_id, "type": node.node_type.name}
        if node.code is not None:
            entry["code"] = node.code
        nodes.append(entry)
    edges = [
        {"src": graph.nodes[e.src].node_id, "dst": graph.nodes[e.dst].node_id, "type": e.edge_type.name}
        for e in graph.edges
    ]
    return {"nodes": nodes, "edges": edges}


# -- corpus I/O ---------------------------------------------------------------


def sample_to_record(sample: Sample) -> dict[str, Any]:
    record: dict[str, Any] = {
        "id": sample.id,
        "code": sample.code,
        "label": bool(sample.label),
        "graph": serialize_graph(sample.graph),
    }
    if sample.provenance:
        record["provenance"] = dict(sample.provenance)
    return record


def sample_from_record(record: Mapping[str, Any], graphs_dir: Path | None = None) -> Sample:
    try:
        graph_doc = record["graph"]
        if isinstance(graph_doc, str):
            # file reference, relative to the graphs directory
            path = Path(graph_doc)
            if graphs_dir is not None and not path.is_absolute():
                path = graphs_dir / path
            graph_doc = json.loads(path.read_text())
        label = record["label"]
        if not isinstance(label, (bool, int)):
            raise GraphFormatError(f"label must be boolean, got {label!r}")
        return Sample(
            id=str(record["id"]),
            code=str(record["code"]),
            label=bool(label),
            graph=parse_graph(graph_doc),
            provenance=record.get("provenance"),
        )
    except KeyError as exc:
        raise GraphFormatError(f"corpus record missing field {exc}") from None


def read_corpus(path: str | Path, graphs_dir: str | Path | None = None) -> list[Sample]:
    """Load a JSON-Lines corpus. Graph fields may be inline or file references."""
    path = Path(path)
    gdir = Path(graphs_dir) if graphs_dir is not None else path.parent
    samples = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"{path}:{lineno}: {exc}") from None
            samples.append(sample_from_record(record, gdir))
    return samples


def write_corpus(samples: Iterable[Sample], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_record(sample), sort_keys=True) + "\n")


# -- dataset preparation --------------------------------------------------------


def filter_oversized(samples: Sequence[Sample], max_nodes: int = 300_000, max_edges: int = 30_000) -> list[Sample]:
    return [s for s in samples if s.graph.num_nodes <= max_nodes and s.graph.num_edges <= max_edges]


def split_dataset(samples: Sequence[Sample], seed: int) -> DatasetSplit:
    """Seeded 70/15/15 split: floor for train and validation, remainder to test."""
    n = len(samples)
    if n < 3:
        raise TooFewSamples(f"need at least 3 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = 7 * n // 10
    n_val = 15 * n // 100
    pick = lambda idx: tuple(samples[i] for i in idx)  # noqa: E731
    return DatasetSplit(
        train=pick(perm[:n_train]),
        validation=pick(perm[n_train:n_train + n_val]),
        test=pick(perm[n_train + n_val:]),
        seed=seed,
    )


def undersample(subset: Sequence[Sample], seed: int) -> list[Sample]:
    """Drop randomly chosen non-vulnerable samples until both classes have equal counts.

    Vulnerable samples are never removed and input order is preserved. If the
    vulnerable class is already the larger one the subset is returned as is.
    """
    vulnerable = [i for i, s in enumerate(subset) if s.label]
    safe = [i for i, s in enumerate(subset) if not s.label]
    if not vulnerable:
        warnings.warn("subset has no vulnerable samples; under-sampling yields an empty set", ImbalanceWarning)
        return []
    if len(safe) < len(vulnerable):
        warnings.warn(
            f"fewer safe ({len(safe)}) than vulnerable ({len(vulnerable)}) samples; nothing removed",
            ImbalanceWarning,
        )
        return list(subset)
    rng = np.random.default_rng(seed)
    kept_safe = rng.choice(np.array(safe, dtype=np.int64), size=len(vulnerable), replace=False)
    keep = set(vulnerable) | set(int(i) for i in kept_safe)
    return [s for i, s in enumerate(subset) if i in keep]


# -- synthetic corpus -------------------------------------------------------------

_SNIPPETS = (
    "int copy(char *dst, const char *src, int n) {\n  int i;\n  for (i = 0; i < n; i++) dst[i] = src[i];\n  return i;\n}",
    "static int parse_len(const unsigned char *p) {\n  int len = p[0];\n  return len + 1;\n}",
    "void reset(struct ctx *c) {\n  c->pos = 0;\n  c->len = 0;\n}",
    "int sum(int *a, int n) {\n  int s = 0;\n  while (n--) s += a[n];\n  return s;\n}",
    "char *dup(const char *s) {\n  char *d = malloc(strlen(s) + 1);\n  strcpy(d, s);\n  return d;\n}",
    "int read_hdr(FILE *f, struct hdr *h) {\n  if (fread(h, sizeof *h, 1, f) != 1) return -1;\n  return h->size;\n}",
    "void push(struct stack *st, int v) {\n  st->data[st->top++] = v;\n}",
    "int cmp(const void *a, const void *b) {\n  return *(const int *)a - *(const int *)b;\n}",
)

_BACKGROUND_NODE_TYPES = (
    NodeType.METHOD, NodeType.BLOCK, NodeType.IDENTIFIER, NodeType.LITERAL, NodeType.CALL,
    NodeType.LOCAL, NodeType.CONTROL_STRUCTURE, NodeType.RETURN, NodeType.METHOD_PARAMETER_IN,
    NodeType.FIELD_IDENTIFIER, NodeType.METHOD_RETURN,
)
_BACKGROUND_EDGE_TYPES = tuple(t for t in EdgeType if t is not EdgeType.REACHING_DEF)


@dataclass(frozen=True)
class MotifSpec:
    """Controls what separates vulnerable from safe graphs in the synthetic corpus.

    ``kind="reaching_def"``: vulnerable graphs carry a CALL -> IDENTIFIER
    REACHING_DEF edge; the safe twin has the same nodes with the edge replaced by
    ``decoy_edge`` (or dropped when ``decoy_edge`` is None). No background edge is
    ever REACHING_DEF.

    ``kind="positional"``: both twins have identical node-type multisets and
    isomorphic edges; the vulnerable twin has the ``marker`` node at index 0, the
    safe twin somewhere else.
    """

    kind: str = "reaching_def"
    min_nodes: int = 6
    max_nodes: int = 14
    edges_per_node: float = 1.5
    decoy_edge: EdgeType | None = None
    marker: NodeType = NodeType.JUMP_TARGET


def _background(rng: np.random.Generator, spec: MotifSpec) -> tuple[list[NodeType], list[tuple[int, int, EdgeType]]]:
    n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
    types = [_BACKGROUND_NODE_TYPES[int(i)] for i in rng.integers(0, len(_BACKGROUND_NODE_TYPES), size=n)]
    edges = []
    # spanning chain keeps graphs connected, then random extras
    for i in range(1, n):
        j = int(rng.integers(0, i))
        edges.append((j, i, _BACKGROUND_EDGE_TYPES[int(rng.integers(0, len(_BACKGROUND_EDGE_TYPES)))]))
    for _ in range(int(round(spec.edges_per_node * n)) - (n - 1)):
        s, d = (int(x) for x in rng.integers(0, n, size=2))
        if s != d:
            edges.append((s, d, _BACKGROUND_EDGE_TYPES[int(rng.integers(0, len(_BACKGROUND_EDGE_TYPES)))]))
    return types, edges


def _build_graph(types: Sequence[NodeType], edges: Sequence[tuple[int, int, EdgeType]]) -> CodeGraph:
    nodes = tuple(Node(f"n{i}", t, None) for i, t in enumerate(types))
    return CodeGraph(nodes, tuple(Edge(s, d, t) for s, d, t in edges))


def _insert_motif(types, edges, rng):
    """Insert a CALL and an IDENTIFIER node at random positions, joined by ``edge_type``."""
    types = list(types)
    edges = list(edges)
    for new_type in (NodeType.CALL, NodeType.IDENTIFIER):
        pos = int(rng.integers(0, len(types) + 1))
        types.insert(pos, new_type)
        edges = [(s + (s >= pos), d + (d >= pos), t) for s, d, t in edges]
        anchor = int(rng.integers(0, len(types)))
        if anchor != pos:
            edges.append((anchor, pos, EdgeType.AST))
        if new_type is NodeType.CALL:
            call_pos = pos
        else:
            ident_pos = pos
            call_pos += call_pos >= pos
    return types, edges, call_pos, ident_pos


def _twins_reaching_def(rng, spec):
    types, edges = _background(rng, spec)
    types, edges, call_pos, ident_pos = _insert_motif(types, edges, rng)
    vulnerable = _build_graph(types, edges + [(call_pos, ident_pos, EdgeType.REACHING_DEF)])
    safe_edges = list(edges)
    if spec.decoy_edge is not None:
        safe_edges.append((call_pos, ident_pos, spec.decoy_edge))
    return vulnerable, _build_graph(types, safe_edges)


def _twins_positional(rng, spec):
    types, edges = _background(rng, spec)
    n = len(types) + 1
    types = [spec.marker] + types
    edges = [(s + 1, d + 1, t) for s, d, t in edges]
    edges.append((int(rng.integers(1, n)), 0, EdgeType.AST))
    vulnerable = _build_graph(types, edges)
    # relabel so the marker lands at a position >= 1
    target = int(rng.integers(1, n))
    perm = list(range(n))
    perm[0], perm[target] = perm[target], perm[0]
    safe_types = [None] * n
    for old, new in enumerate(perm):
        safe_types[new] = types[old]
    safe = _build_graph(safe_types, [(perm[s], perm[d], t) for s, d, t in edges])
    return vulnerable, safe


def synth_dataset(seed: int, n: int, motif_spec: MotifSpec | None = None) -> list[Sample]:
    """Generate ``n`` samples as vulnerable/safe twins sharing identical source text.

    The label signal lives only in the graph, so a text-only model sits at chance.
    """
    if n % 2:
        raise ValueError(f"n must be even, got {n}")
    spec = motif_spec or MotifSpec()
    builders = {"reaching_def": _twins_reaching_def, "positional": _twins_positional}
    if spec.kind not in builders:
        raise ValueError(f"unknown motif kind {spec.kind!r}")
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n // 2):
        code = _SNIPPETS[int(rng.integers(0, len(_SNIPPETS)))]
        vulnerable, safe = builders[spec.kind](rng, spec)
        meta = {"project": "synthetic", "motif": spec.kind}
        samples.append(Sample(f"synth-{seed}-{k:05d}-v", code, True, vulnerable, meta))
        samples.append(Sample(f"synth-{seed}-{k:05d}-s", code, False, safe, meta))
    return samples


def synth_imbalanced(seed: int, n: int, vulnerable_fraction: float = 0.1, motif_spec: MotifSpec | None = None) -> list[Sample]:
    """``n`` synthetic samples with about ``vulnerable_fraction`` of them vulnerable.

    Drawn from a twin corpus by keeping the first vulnerable and first safe samples, so
    the class prior looks like a real corpus (safe-heavy) and under-sampling has work to do.
    """
    if not 0.0 <= vulnerable_fraction <= 1.0:
        raise ValueError("vulnerable_fraction must lie in [0, 1]")
    n_vul = round(n * vulnerable_fraction)
    n_safe = n - n_vul
    pool = synth_dataset(seed, 2 * max(n_vul, n_safe, 1), motif_spec)
    vul = [s for s in pool if s.label][:n_vul]
    safe = [s for s in pool if not s.label][:n_safe]
    keep = {s.id for s in vul} | {s.id for s in safe}
    return [s for s in pool if s.id in keep]
