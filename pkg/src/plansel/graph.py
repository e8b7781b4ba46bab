"""Typed planning-task graphs and node feature construction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

REPRESENTATIONS = ("grounded", "lifted")

# Type names are descriptive only; graphs store integer type indices.
GROUNDED_TYPES = (
    "variable", "value", "operator", "precondition", "effect", "goal",
)
LIFTED_TYPES = (
    "predicate", "type", "object", "constant", "action", "parameter",
    "precondition", "effect", "positive_literal", "negative_literal",
    "argument", "initial_state", "goal", "axiom", "function",
)

FEATURE_BLOCKS = ("node_type", "in_degree", "out_degree", "neighbor_type_in", "neighbor_type_out")
DEFAULT_DEGREE_CAP = 32


class GraphError(ValueError):
    """Raised when a graph violates its structural invariants."""


@dataclass(frozen=True)
class NodeTypeVocab:
    representation: str
    names: tuple[str, ...]

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("node type names must be unique")
        expected = 6 if self.representation == "grounded" else 15
        if len(self.names) != expected:
            raise ValueError(f"{self.representation} vocabulary has {expected} types, got {len(self.names)}")

    @property
    def size(self) -> int:
        return len(self.names)

    @classmethod
    def for_representation(cls, representation: str) -> "NodeTypeVocab":
        names = GROUNDED_TYPES if representation == "grounded" else LIFTED_TYPES
        return cls(representation, names)


GROUNDED = NodeTypeVocab("grounded", GROUNDED_TYPES)
LIFTED = NodeTypeVocab("lifted", LIFTED_TYPES)


def vocab_for(representation: str) -> NodeTypeVocab:
    if representation == "grounded":
        return GROUNDED
    if representation == "lifted":
        return LIFTED
    raise ValueError(f"unknown representation {representation!r}")


class PlanningGraph:
    """Directed graph with one integer type per node.

    Duplicate edges are collapsed and self-loops dropped on construction,
    keeping first-occurrence order. Instances are treated as immutable.
    """

    __slots__ = ("task_id", "domain", "representation", "num_nodes", "node_types",
                 "src", "dst", "_cache")

    def __init__(self, task_id: str, domain: str, representation: str,
                 node_types: Sequence[int], edges: Sequence[tuple[int, int]] | np.ndarray = ()):
        if representation not in REPRESENTATIONS:
            raise GraphError(f"unknown representation {representation!r}")
        vocab = vocab_for(representation)
        types = np.asarray(node_types, dtype=np.int64).reshape(-1)
        n = types.size
        bad = np.flatnonzero((types < 0) | (types >= vocab.size))
        if bad.size:
            v = int(bad[0])
            raise GraphError(f"node {v}: type {int(types[v])} outside {representation} vocabulary (size {vocab.size})")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        out_of_range = np.flatnonzero((e < 0).any(axis=1) | (e >= n).any(axis=1))
        if out_of_range.size:
            i = int(out_of_range[0])
            raise GraphError(f"edge {i} ({int(e[i, 0])}, {int(e[i, 1])}) has an endpoint outside 0..{n - 1}")
        e = e[e[:, 0] != e[:, 1]]
        if len(e):
            _, first = np.unique(e[:, 0] * max(n, 1) + e[:, 1], return_index=True)
            e = e[np.sort(first)]
        self.task_id = task_id
        self.domain = domain
        self.representation = representation
        self.num_nodes = int(n)
        self.node_types = types
        self.src = np.ascontiguousarray(e[:, 0])
        self.dst = np.ascontiguousarray(e[:, 1])
        self.node_types.setflags(write=False)
        self.src.setflags(write=False)
        self.dst.setflags(write=False)
        self._cache: dict = {}

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    @property
    def vocab(self) -> NodeTypeVocab:
        return vocab_for(self.representation)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_nodes)

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.num_nodes)

    def relabel(self, perm: Sequence[int]) -> "PlanningGraph":
        """Return the graph with old node ``v`` renamed to ``perm[v]``."""
        perm = np.asarray(perm, dtype=np.int64)
        types = np.empty_like(self.node_types)
        types[perm] = self.node_types
        edges = np.stack([perm[self.src], perm[self.dst]], axis=1)
        return PlanningGraph(self.task_id, self.domain, self.representation, types, edges)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PlanningGraph):
            return NotImplemented
        return (self.task_id == other.task_id and self.domain == other.domain
                and self.representation == other.representation
                and np.array_equal(self.node_types, other.node_types)
                and np.array_equal(self.src, other.src) and np.array_equal(self.dst, other.dst))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (f"PlanningGraph({self.task_id!r}, {self.representation}, "
                f"nodes={self.num_nodes}, edges={self.num_edges})")


def _check_vocab(graph: PlanningGraph, vocab: NodeTypeVocab) -> None:
    if graph.representation != vocab.representation:
        raise GraphError(f"graph is {graph.representation} but vocabulary is {vocab.representation}")


def one_hot_node_types(graph: PlanningGraph, vocab: NodeTypeVocab | None = None) -> np.ndarray:
    vocab = vocab or graph.vocab
    _check_vocab(graph, vocab)
    out = np.zeros((graph.num_nodes, vocab.size))
    out[np.arange(graph.num_nodes), graph.node_types] = 1.0
    return out


def _bucket_one_hot(degree: np.ndarray, cap: int) -> np.ndarray:
    out = np.zeros((degree.size, cap))
    out[np.arange(degree.size), np.minimum(degree, cap - 1)] = 1.0
    return out


def degree_features(graph: PlanningGraph, mode: str = "in", cap: int = DEFAULT_DEGREE_CAP) -> np.ndarray:
    """One-hot degree buckets; degrees at or above ``cap - 1`` share the last bucket."""
    if cap < 2:
        raise ValueError("degree cap must be at least 2")
    if mode == "in":
        return _bucket_one_hot(graph.in_degree(), cap)
    if mode == "out":
        return _bucket_one_hot(graph.out_degree(), cap)
    if mode == "in_out":
        return np.hstack([_bucket_one_hot(graph.in_degree(), cap),
                          _bucket_one_hot(graph.out_degree(), cap)])
    raise ValueError(f"unknown degree mode {mode!r}")


def neighbor_type_features(graph: PlanningGraph, vocab: NodeTypeVocab | None = None,
                           direction: str = "both") -> np.ndarray:
    """Per node, how many in- and/or out-neighbours carry each type."""
    vocab = vocab or graph.vocab
    _check_vocab(graph, vocab)
    n, k = graph.num_nodes, vocab.size

    def counts(at: np.ndarray, other: np.ndarray) -> np.ndarray:
        out = np.zeros((n, k))
        np.add.at(out, (at, graph.node_types[other]), 1.0)
        return out

    if direction == "in":
        return counts(graph.dst, graph.src)
    if direction == "out":
        return counts(graph.src, graph.dst)
    if direction == "both":
        return np.hstack([counts(graph.dst, graph.src), counts(graph.src, graph.dst)])
    raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class FeatureConfig:
    blocks: tuple[str, ...] = ("node_type",)
    degree_cap: int = DEFAULT_DEGREE_CAP

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if "node_type" not in blocks:
            raise ValueError("feature config must include the node_type block")
        unknown = [b for b in blocks if b not in FEATURE_BLOCKS]
        if unknown:
            raise ValueError(f"unknown feature blocks {unknown}")
        if len(set(blocks)) != len(blocks):
            raise ValueError("feature blocks must not repeat")
        if self.degree_cap < 2:
            raise ValueError("degree cap must be at least 2")

    def block_width(self, block: str, vocab: NodeTypeVocab) -> int:
        if block in ("in_degree", "out_degree"):
            return self.degree_cap
        return vocab.size

    def width(self, vocab: NodeTypeVocab) -> int:
        return sum(self.block_width(b, vocab) for b in self.blocks)

    @classmethod
    def from_preset(cls, name: str, degree_cap: int = DEFAULT_DEGREE_CAP) -> "FeatureConfig":
        presets = {
            "type": ("node_type",),
            "type+indeg": ("node_type", "in_degree"),
            "type+inoutdeg": ("node_type", "in_degree", "out_degree"),
            "type+neigh": ("node_type", "neighbor_type_in", "neighbor_type_out"),
        }
        if name not in presets:
            raise ValueError(f"unknown feature preset {name!r}; choose from {sorted(presets)}")
        return cls(presets[name], degree_cap)


def _block(graph: PlanningGraph, vocab: NodeTypeVocab, block: str, cap: int) -> np.ndarray:
    if block == "node_type":
        return one_hot_node_types(graph, vocab)
    if block == "in_degree":
        return degree_features(graph, "in", cap)
    if block == "out_degree":
        return degree_features(graph, "out", cap)
    if block == "neighbor_type_in":
        return neighbor_type_features(graph, vocab, "in")
    if block == "neighbor_type_out":
        return neighbor_type_features(graph, vocab, "out")
    raise ValueError(f"unknown feature block {block!r}")


def assemble_features(graph: PlanningGraph, vocab: NodeTypeVocab | None = None,
                      config: FeatureConfig | None = None) -> np.ndarray:
    vocab = vocab or graph.vocab
    config = config or FeatureConfig()
    _check_vocab(graph, vocab)
    parts = [_block(graph, vocab, b, config.degree_cap) for b in config.blocks]
    return np.hstack(parts) if parts else np.zeros((graph.num_nodes, 0))


@dataclass
class GraphStats:
    num_nodes: int
    num_edges: int
    avg_in_degree: float
    per_type_avg_degree: dict[int, float] = field(default_factory=dict)


def graph_stats(graph: PlanningGraph) -> GraphStats:
    """Counts plus mean total (in + out) degree for every node type present."""
    n = graph.num_nodes
    total = graph.in_degree() + graph.out_degree()
    per_type = {}
    for t in np.unique(graph.node_types):
        per_type[int(t)] = float(total[graph.node_types == t].mean())
    return GraphStats(n, graph.num_edges, graph.num_edges / n if n else 0.0, per_type)
