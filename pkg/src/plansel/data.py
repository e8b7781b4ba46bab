"""Graph/label/split file formats, fold generation and label encodings.

Graph file (UTF-8 text)::

    PSG1 <representation> <task_id> <domain>
    <num_nodes> <num_edges>
    <type_0> <type_1> ...
    <src> <dst>          # one line per edge

Label file: CSV with header ``task_id,domain,p0,...,p16``.
Split file: one line per fold, ``fold <i> test <id> <id> ...``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import NUM_PLANNERS, SENTINEL, TIMEOUT
from .graph import (
    FeatureConfig,
    GraphError,
    NodeTypeVocab,
    PlanningGraph,
    REPRESENTATIONS,
    vocab_for,
)

GRAPH_MAGIC = "PSG1"
GRAPH_SUFFIX = ".psg"


class FormatError(ValueError):
    """Malformed or contract-violating input file; message carries the location."""


# ---------------------------------------------------------------- graph files

def parse_graph_file(data: bytes | str, source: str = "<graph>") -> PlanningGraph:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = text.splitlines()

    def line(i: int) -> str:
        if i >= len(lines):
            raise FormatError(f"{source}:{i + 1}: unexpected end of file")
        return lines[i]

    header = line(0).split()
    if len(header) != 4 or header[0] != GRAPH_MAGIC:
        raise FormatError(f"{source}:1: expected '{GRAPH_MAGIC} <representation> <task_id> <domain>'")
    _, representation, task_id, domain = header
    if representation not in REPRESENTATIONS:
        raise FormatError(f"{source}:1: unknown representation {representation!r}")
    counts = line(1).split()
    try:
        num_nodes, num_edges = (int(c) for c in counts)
    except ValueError:
        raise FormatError(f"{source}:2: expected '<num_nodes> <num_edges>'") from None
    if num_nodes < 0 or num_edges < 0:
        raise FormatError(f"{source}:2: counts must be non-negative")
    try:
        types = [int(t) for t in line(2).split()]
    except ValueError:
        raise FormatError(f"{source}:3: node types must be integers") from None
    if len(types) != num_nodes:
        raise FormatError(f"{source}:3: expected {num_nodes} node types, found {len(types)}")
    vocab = vocab_for(representation)
    for v, t in enumerate(types):
        if not 0 <= t < vocab.size:
            raise FormatError(f"{source}:3: node {v} has type {t} outside 0..{vocab.size - 1}")

    body = [l for l in lines[3:] if l.strip()]
    if len(body) != num_edges:
        raise FormatError(f"{source}: header declares {num_edges} edges, found {len(body)}")
    edges = np.empty((num_edges, 2), dtype=np.int64)
    for i, l in enumerate(body):
        parts = l.split()
        lineno = 4 + i
        try:
            if len(parts) != 2:
                raise ValueError
            s, d = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"{source}:{lineno}: expected '<src> <dst>'") from None
        for end in (s, d):
            if not 0 <= end < num_nodes:
                raise FormatError(f"{source}:{lineno}: edge ({s}, {d}) has dangling endpoint {end}")
        edges[i] = (s, d)
    try:
        return PlanningGraph(task_id, domain, representation, types, edges)
    except GraphError as exc:
        raise FormatError(f"{source}: {exc}") from None


def serialize_graph(graph: PlanningGraph) -> str:
    out = io.StringIO()
    out.write(f"{GRAPH_MAGIC} {graph.representation} {graph.task_id} {graph.domain}\n")
    out.write(f"{graph.num_nodes} {graph.num_edges}\n")
    out.write(" ".join(map(str, graph.node_types.tolist())) + "\n")
    for s, d in zip(graph.src.tolist(), graph.dst.tolist()):
        out.write(f"{s} {d}\n")
    return out.getvalue()


def write_graph_file(path: str | Path, graph: PlanningGraph) -> None:
    Path(path).write_text(serialize_graph(graph), encoding="utf-8")


# ---------------------------------------------------------------- labels

@dataclass(frozen=True)
class RuntimeLabelSet:
    task_id: str
    domain: str
    runtimes: tuple[float, ...]
    timeout: float = TIMEOUT
    sentinel: float = SENTINEL

    def __post_init__(self):
        if len(self.runtimes) != NUM_PLANNERS:
            raise ValueError(f"{self.task_id}: expected {NUM_PLANNERS} runtimes, got {len(self.runtimes)}")
        for p, r in enumerate(self.runtimes):
            if not (0.0 <= r <= self.timeout or r == self.sentinel):
                raise ValueError(f"{self.task_id}: planner {p} runtime {r} is neither <= {self.timeout} nor {self.sentinel}")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.runtimes, dtype=np.float64)


def label_header() -> list[str]:
    return ["task_id", "domain"] + [f"p{i}" for i in range(NUM_PLANNERS)]


def parse_labels(data: bytes | str, source: str = "<labels>") -> list[RuntimeLabelSet]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError(f"{source}: empty label file")
    width = 2 + NUM_PLANNERS
    if len(rows[0]) != width:
        raise FormatError(f"{source}:1: header has {len(rows[0])} columns, expected {width}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise FormatError(f"{source}:{lineno}: {len(row)} columns, expected {width}")
        runtimes = []
        for col, cell in enumerate(row[2:], start=3):
            try:
                r = float(cell)
            except ValueError:
                raise FormatError(f"{source}:{lineno}: column {col} runtime {cell!r} is not numeric") from None
            if not math.isfinite(r) or r < 0:
                raise FormatError(f"{source}:{lineno}: column {col} runtime {cell!r} is invalid")
            if r > TIMEOUT and r != SENTINEL:
                raise FormatError(f"{source}:{lineno}: column {col} runtime {r} exceeds the "
                                  f"{TIMEOUT:g}s timeout but is not the {SENTINEL:g} sentinel")
            runtimes.append(r)
        out.append(RuntimeLabelSet(row[0], row[1], tuple(runtimes)))
    return out


def _fmt_runtime(r: float) -> str:
    return str(int(r)) if float(r).is_integer() else repr(float(r))


def serialize_labels(labels: Iterable[RuntimeLabelSet]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(label_header())
    for l in labels:
        w.writerow([l.task_id, l.domain] + [_fmt_runtime(r) for r in l.runtimes])
    return out.getvalue()


def derive_binary_labels(labels: RuntimeLabelSet) -> np.ndarray:
    """1 where the planner finished within the timeout (boundary inclusive)."""
    return (labels.array <= labels.timeout).astype(np.int64)


def derive_best_planner(labels: RuntimeLabelSet) -> tuple[int, bool]:
    """Fastest planner (lowest index on ties) and whether any planner solved the task."""
    r = labels.array
    solved = bool(np.any(r <= labels.timeout))
    return (int(np.argmin(r)) if solved else 0), solved


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    task_id: str
    domain: str
    graph_path: str
    labels: RuntimeLabelSet


@dataclass
class DatasetManifest:
    representation: str
    entries: list[ManifestEntry]
    graphs: dict[str, PlanningGraph] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [e.task_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise FormatError(f"duplicate task id {dup!r} in manifest")

    @property
    def task_ids(self) -> list[str]:
        return [e.task_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, task_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.task_id == task_id:
                return e
        raise KeyError(task_id)

    def graph(self, task_id: str) -> PlanningGraph:
        g = self.graphs.get(task_id)
        if g is None:
            path = self.entry(task_id).graph_path
            g = parse_graph_file(Path(path).read_bytes(), source=path)
            self.graphs[task_id] = g
        return g

    def labels(self, task_id: str) -> RuntimeLabelSet:
        return self.entry(task_id).labels

    @property
    def vocab(self) -> NodeTypeVocab:
        return vocab_for(self.representation)

    @classmethod
    def from_memory(cls, graphs: Sequence[PlanningGraph],
                    labels: Sequence[RuntimeLabelSet]) -> "DatasetManifest":
        if len(graphs) != len(labels):
            raise FormatError(f"{len(graphs)} graphs but {len(labels)} label rows")
        reprs = {g.representation for g in graphs}
        if len(reprs) > 1:
            raise FormatError(f"mixed representations {sorted(reprs)}")
        by_id = {l.task_id: l for l in labels}
        entries = []
        for g in graphs:
            if g.task_id not in by_id:
                raise FormatError(f"no labels for task {g.task_id!r}")
            entries.append(ManifestEntry(g.task_id, g.domain, "", by_id[g.task_id]))
        rep = reprs.pop() if reprs else "grounded"
        return cls(rep, entries, {g.task_id: g for g in graphs})


def load_manifest(directory: str | Path, representation: str | None = None) -> DatasetManifest:
    """Load ``labels.csv`` plus ``graphs/<task_id>.psg`` from a dataset directory.

    Every graph is parsed up front so malformed files fail at load time.
    """
    root = Path(directory)
    labels_path = root / "labels.csv"
    labels = parse_labels(labels_path.read_bytes(), source=str(labels_path))
    entries, graphs = [], {}
    for l in labels:
        path = root / "graphs" / f"{l.task_id}{GRAPH_SUFFIX}"
        if not path.exists():
            raise FormatError(f"{path}: graph file missing for task {l.task_id!r}")
        g = parse_graph_file(path.read_bytes(), source=str(path))
        if g.task_id != l.task_id or g.domain != l.domain:
            raise FormatError(f"{path}: header ({g.task_id}, {g.domain}) disagrees with labels "
                              f"({l.task_id}, {l.domain})")
        if representation is not None and g.representation != representation:
            raise FormatError(f"{path}: representation {g.representation}, expected {representation}")
        representation = g.representation
        entries.append(ManifestEntry(l.task_id, l.domain, str(path), l))
        graphs[l.task_id] = g
    return DatasetManifest(representation or "grounded", entries, graphs)


def write_dataset(directory: str | Path, graphs: Sequence[PlanningGraph],
                  labels: Sequence[RuntimeLabelSet]) -> None:
    root = Path(directory)
    (root / "graphs").mkdir(parents=True, exist_ok=True)
    for g in graphs:
        write_graph_file(root / "graphs" / f"{g.task_id}{GRAPH_SUFFIX}", g)
    (root / "labels.csv").write_text(serialize_labels(labels), encoding="utf-8")


# ---------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    mode: str
    seed: int | None = None


def make_folds(manifest: DatasetManifest | Sequence[tuple[str, str]], mode: str = "random",
               k: int = 10, seed: int = 0) -> list[FoldSpec]:
    """Partition task ids into ``k`` test folds.

    ``manifest`` may also be a sequence of ``(task_id, domain)`` pairs.
    Domain mode assigns whole domains, largest first, to the currently
    smallest fold.
    """
    if isinstance(manifest, DatasetManifest):
        items = [(e.task_id, e.domain) for e in manifest.entries]
    else:
        items = [tuple(x) for x in manifest]
    if k < 2:
        raise ValueError("need at least 2 folds")
    if not items:
        raise ValueError("cannot split an empty manifest")
    ids = [i for i, _ in items]
    rng = np.random.default_rng(seed)
    if mode == "random":
        order = rng.permutation(len(ids))
        groups = [[ids[j] for j in chunk] for chunk in np.array_split(order, k)]
    elif mode in ("domain", "domain_preserving"):
        mode = "domain_preserving"
        by_domain: dict[str, list[str]] = {}
        for tid, dom in items:
            by_domain.setdefault(dom, []).append(tid)
        if len(by_domain) < k:
            raise ValueError(f"domain-preserving split needs at least {k} domains, found {len(by_domain)}")
        names = sorted(by_domain)
        names = [names[j] for j in rng.permutation(len(names))]
        names.sort(key=lambda d: -len(by_domain[d]))
        groups = [[] for _ in range(k)]
        for d in names:
            target = min(range(k), key=lambda f: (len(groups[f]), f))
            groups[target].extend(by_domain[d])
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    folds = []
    for f, test in enumerate(groups):
        test_set = set(test)
        train = tuple(i for i in ids if i not in test_set)
        folds.append(FoldSpec(f, train, tuple(i for i in ids if i in test_set), mode, seed))
    return folds


def parse_split_file(data: bytes | str, all_ids: Sequence[str], mode: str = "provided",
                     source: str = "<splits>") -> list[FoldSpec]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    known = set(all_ids)
    folds = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) < 3 or parts[0] != "fold" or parts[2] != "test":
            raise FormatError(f"{source}:{lineno}: expected 'fold <i> test <id> ...'")
        try:
            index = int(parts[1])
        except ValueError:
            raise FormatError(f"{source}:{lineno}: fold index {parts[1]!r} is not an integer") from None
        test = parts[3:]
        unknown = [t for t in test if t not in known]
        if unknown:
            raise FormatError(f"{source}:{lineno}: unknown task id {unknown[0]!r}")
        if len(set(test)) != len(test):
            raise FormatError(f"{source}:{lineno}: repeated task id in test set")
        test_set = set(test)
        train = tuple(i for i in all_ids if i not in test_set)
        folds.append(FoldSpec(index, train, tuple(i for i in all_ids if i in test_set), mode))
    if not folds:
        raise FormatError(f"{source}: no folds")
    return folds


def serialize_splits(folds: Iterable[FoldSpec]) -> str:
    return "".join(f"fold {f.fold_index} test {' '.join(f.test_ids)}\n" for f in folds)


# ---------------------------------------------------------------- correlation

CORRELATION_LABELS = ("time", "solvable")


@dataclass
class CorrelationMatrix:
    names: list[str]
    values: np.ndarray
    degenerate: np.ndarray

    def get(self, a: str, b: str) -> float:
        return float(self.values[self.names.index(a), self.names.index(b)])

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "values": self.values.tolist(),
            "degenerate": self.degenerate.tolist(),
        }


def pearson_matrix(columns: dict[str, np.ndarray]) -> CorrelationMatrix:
    """Pairwise Pearson coefficients; pairs involving a constant column are 0 and flagged."""
    names = list(columns)
    X = np.column_stack([np.asarray(columns[n], dtype=np.float64) for n in names])
    centred = X - X.mean(axis=0)
    norms = np.sqrt((centred ** 2).sum(axis=0))
    scale = np.abs(X).max(axis=0) if len(X) else np.zeros(len(names))
    constant = norms <= 1e-12 * np.maximum(scale, 1.0) * math.sqrt(max(len(X), 1))
    safe = np.where(constant, 1.0, norms)
    corr = (centred.T @ centred) / np.outer(safe, safe)
    corr = np.clip(corr, -1.0, 1.0)
    degenerate = constant[:, None] | constant[None, :]
    corr[degenerate] = 0.0
    np.fill_diagonal(corr, np.where(constant, 0.0, 1.0))
    return CorrelationMatrix(names, corr, degenerate)


def graph_scalar_features(graph: PlanningGraph, blocks: Sequence[str]) -> dict[str, float]:
    """Per-graph averages of the raw quantity behind each feature block.

    node_type averages the type index; degree blocks average the degree;
    neighbour blocks average, over nodes with such neighbours, the mean
    neighbour type index.
    """
    out = {}
    n = graph.num_nodes
    types = graph.node_types.astype(np.float64)
    for b in blocks:
        if b == "node_type":
            out[b] = float(types.mean()) if n else 0.0
        elif b == "in_degree":
            out[b] = float(graph.in_degree().mean()) if n else 0.0
        elif b == "out_degree":
            out[b] = float(graph.out_degree().mean()) if n else 0.0
        elif b in ("neighbor_type_in", "neighbor_type_out"):
            at, other = (graph.dst, graph.src) if b == "neighbor_type_in" else (graph.src, graph.dst)
            sums = np.bincount(at, weights=types[other], minlength=n)
            cnt = np.bincount(at, minlength=n)
            has = cnt > 0
            out[b] = float((sums[has] / cnt[has]).mean()) if has.any() else 0.0
        else:
            raise ValueError(f"unknown feature block {b!r}")
    return out


def feature_label_correlation(manifest: DatasetManifest, vocab: NodeTypeVocab | None = None,
                              config: FeatureConfig | None = None) -> CorrelationMatrix:
    vocab = vocab or manifest.vocab
    config = config or FeatureConfig(("node_type", "in_degree", "out_degree",
                                      "neighbor_type_in", "neighbor_type_out"))
    if len(manifest) < 3:
        raise ValueError("correlation needs at least 3 tasks")
    if vocab.representation != manifest.representation:
        raise GraphError(f"manifest is {manifest.representation} but vocabulary is {vocab.representation}")
    cols: dict[str, list[float]] = {b: [] for b in config.blocks}
    time_col, solv_col = [], []
    for e in manifest.entries:
        feats = graph_scalar_features(manifest.graph(e.task_id), config.blocks)
        for b in config.blocks:
            cols[b].append(feats[b])
        time_col.append(float(e.labels.array.mean()))
        solv_col.append(float(derive_binary_labels(e.labels).mean()))
    columns = {b: np.asarray(v) for b, v in cols.items()}
    columns["time"] = np.asarray(time_col)
    columns["solvable"] = np.asarray(solv_col)
    return pearson_matrix(columns)
