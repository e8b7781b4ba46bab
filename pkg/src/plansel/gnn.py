"""Message-passing layers (GCN, GGNN, GAT, GIN), readout, training and embeddings.

Graphs are processed as a disjoint union (:class:`GraphBatch`) so a mini-batch
of graphs is one sparse propagation; readout reduces per graph.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import NUM_PLANNERS, SENTINEL
from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetManifest, derive_best_planner, derive_binary_labels
from .graph import FeatureConfig, PlanningGraph, assemble_features

log = logging.getLogger(__name__)

VARIANTS = ("gcn", "ggnn", "gat", "gin")
TASKS = ("time", "binary", "multiclass", "embed")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- batching

class GraphBatch:
    """Disjoint union of graphs with the edge index sets each layer needs."""

    def __init__(self, graphs: Sequence[PlanningGraph]):
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.num_graphs = len(graphs)
        self.num_nodes = int(offsets[-1])
        self.sizes = sizes
        self.graph_index = np.repeat(np.arange(len(graphs)), sizes)
        if graphs:
            self.src = np.concatenate([g.src + o for g, o in zip(graphs, offsets)])
            self.dst = np.concatenate([g.dst + o for g, o in zip(graphs, offsets)])
        else:
            self.src = self.dst = np.zeros(0, dtype=np.int64)
        self._gcn = None
        self._loops = None

    @classmethod
    def of(cls, graph: "PlanningGraph | GraphBatch") -> "GraphBatch":
        return graph if isinstance(graph, GraphBatch) else cls([graph])

    def gcn_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Symmetrised edges plus self-loops with weights ``1/sqrt(d_u d_v)``."""
        if self._gcn is None:
            n = self.num_nodes
            loops = np.arange(n)
            s = np.concatenate([self.src, self.dst, loops])
            d = np.concatenate([self.dst, self.src, loops])
            key = np.unique(s * max(n, 1) + d)
            s, d = key // max(n, 1), key % max(n, 1)
            deg = np.bincount(d, minlength=n).astype(np.float64)
            w = 1.0 / np.sqrt(deg[s] * deg[d])
            self._gcn = (s, d, w[:, None])
        return self._gcn

    def with_self_loops(self) -> tuple[np.ndarray, np.ndarray]:
        if self._loops is None:
            loops = np.arange(self.num_nodes)
            self._loops = (np.concatenate([self.src, loops]), np.concatenate([self.dst, loops]))
        return self._loops


# ---------------------------------------------------------------- parameters

@dataclass
class LayerParams:
    variant: str
    d_in: int
    d_out: int
    tensors: dict[str, Tensor]
    heads: int = 1

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape or (fan_in, fan_out)), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_layer(variant: str, d_in: int, d_out: int, rng: np.random.Generator,
               heads: int = 4, mlp_hidden: int | None = None) -> LayerParams:
    if variant == "gcn":
        t = {"W": _glorot(rng, d_in, d_out)}
    elif variant == "ggnn":
        if d_in != d_out:
            raise ValueError("GGNN layers keep width: d_in must equal d_out")
        d = d_out
        t = {"W_in": _glorot(rng, d, d), "W_out": _glorot(rng, d, d), "b_msg": _zeros(d)}
        for gate in ("z", "r", "h"):
            t[f"W_{gate}"] = _glorot(rng, d, d)
            t[f"U_{gate}"] = _glorot(rng, d, d)
            t[f"b_{gate}"] = _zeros(d)
    elif variant == "gat":
        if heads < 1:
            raise ValueError("GAT needs at least one head")
        t = {}
        for k in range(heads):
            t[f"W_{k}"] = _glorot(rng, d_in, d_out)
            t[f"a_dst_{k}"] = _glorot(rng, 2 * d_out, 1, shape=(d_out, 1))
            t[f"a_src_{k}"] = _glorot(rng, 2 * d_out, 1, shape=(d_out, 1))
    elif variant == "gin":
        h = mlp_hidden or d_out
        t = {"eps": _zeros(1), "W1": _glorot(rng, d_in, h), "b1": _zeros(h),
             "W2": _glorot(rng, h, d_out), "b2": _zeros(d_out)}
    else:
        raise ValueError(f"unknown GNN variant {variant!r}")
    return LayerParams(variant, d_in, d_out, t, heads if variant == "gat" else 1)


def _check_rows(H: Tensor, batch: GraphBatch, params: LayerParams) -> None:
    if H.data.ndim != 2 or H.shape[0] != batch.num_nodes:
        raise ValueError(f"feature matrix has shape {H.shape}, graph has {batch.num_nodes} nodes")
    if H.shape[1] != params.d_in:
        raise ValueError(f"{params.variant} layer expects width {params.d_in}, got {H.shape[1]}")


# ---------------------------------------------------------------- layers

def gcn_forward(params: LayerParams, graph, H: Tensor, activation: bool = True) -> Tensor:
    batch = GraphBatch.of(graph)
    H = ad.as_tensor(H)
    _check_rows(H, batch, params)
    s, d, w = batch.gcn_edges()
    XW = H @ params["W"]
    out = ad.segment_sum(ad.gather(XW, s) * w, d, batch.num_nodes)
    return ad.relu(out) if activation else out


def ggnn_forward(params: LayerParams, graph, H: Tensor) -> Tensor:
    batch = GraphBatch.of(graph)
    H = ad.as_tensor(H)
    _check_rows(H, batch, params)
    n = batch.num_nodes
    p = params.tensors
    incoming = ad.segment_sum(ad.gather(H @ p["W_in"], batch.src), batch.dst, n)
    outgoing = ad.segment_sum(ad.gather(H @ p["W_out"], batch.dst), batch.src, n)
    m = incoming + outgoing + p["b_msg"]
    z = ad.sigmoid(m @ p["W_z"] + H @ p["U_z"] + p["b_z"])
    r = ad.sigmoid(m @ p["W_r"] + H @ p["U_r"] + p["b_r"])
    h_cand = ad.tanh(m @ p["W_h"] + (r * H) @ p["U_h"] + p["b_h"])
    return (1.0 - z) * h_cand + z * H


def gat_forward(params: LayerParams, graph, H: Tensor, activation: bool = True,
                return_attention: bool = False):
    batch = GraphBatch.of(graph)
    H = ad.as_tensor(H)
    _check_rows(H, batch, params)
    n = batch.num_nodes
    src, dst = batch.with_self_loops()
    total = None
    attention = []
    for k in range(params.heads):
        Z = H @ params[f"W_{k}"]
        score = ad.gather(Z @ params[f"a_dst_{k}"], dst) + ad.gather(Z @ params[f"a_src_{k}"], src)
        alpha = ad.segment_softmax(ad.leaky_relu(score, 0.2), dst, n)
        attention.append(alpha.data[:, 0])
        head = ad.segment_sum(ad.gather(Z, src) * alpha, dst, n)
        total = head if total is None else total + head
    out = total * (1.0 / params.heads)
    if activation:
        out = ad.relu(out)
    if return_attention:
        return out, attention, (src, dst)
    return out


def gin_forward(params: LayerParams, graph, H: Tensor) -> Tensor:
    batch = GraphBatch.of(graph)
    H = ad.as_tensor(H)
    _check_rows(H, batch, params)
    p = params.tensors
    agg = H * (1.0 + p["eps"]) + ad.segment_sum(ad.gather(H, batch.src), batch.dst, batch.num_nodes)
    hidden = ad.relu(agg @ p["W1"] + p["b1"])
    return hidden @ p["W2"] + p["b2"]


def layer_forward(params: LayerParams, graph, H: Tensor, activation: bool = True) -> Tensor:
    if params.variant == "gcn":
        return gcn_forward(params, graph, H, activation)
    if params.variant == "ggnn":
        return ggnn_forward(params, graph, H)
    if params.variant == "gat":
        return gat_forward(params, graph, H, activation)
    out = gin_forward(params, graph, H)
    return ad.relu(out) if activation else out


def readout(H: Tensor, graph, mode: str = "mean") -> Tensor:
    """Pool node rows into one row per graph (shape ``[G, d]``; ``[d]`` for a single graph)."""
    H = ad.as_tensor(H)
    single = isinstance(graph, PlanningGraph)
    batch = GraphBatch.of(graph)
    if batch.num_nodes == 0 or np.any(batch.sizes == 0):
        raise ValueError("readout of an empty graph is undefined")
    if mode not in ("mean", "sum"):
        raise ValueError(f"unknown readout {mode!r}")
    if single:
        return ad.mean_rows(H) if mode == "mean" else ad.sum_rows(H)
    pooled = ad.segment_sum(H, batch.graph_index, batch.num_graphs)
    if mode == "mean":
        pooled = pooled * (1.0 / batch.sizes[:, None])
    return pooled


def _row(x: Tensor) -> Tensor:
    """[1, d] -> [d]."""
    def backward(g):
        x._accumulate(g[None, :])
    return ad._result(x.data[0], (x,), "row", backward)


# ---------------------------------------------------------------- model

@dataclass
class ModelConfig:
    variant: str = "gcn"
    in_width: int = 6
    hidden: int = 100
    layers: int = 2
    readout: str = "mean"
    task: str = "time"
    heads: int = 4
    final_activation: bool = True
    output_scale: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown GNN variant {self.variant!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("need at least one layer and positive hidden width")
        if self.variant == "ggnn" and self.in_width > self.hidden:
            raise ValueError(f"GGNN pads features to the hidden width; {self.in_width} > {self.hidden}")
        if self.output_scale is None:
            # time heads predict seconds in units of the sentinel so unit-scale
            # activations can reach it; the loss still sees raw seconds
            self.output_scale = SENTINEL if self.task == "time" else 1.0


class GnnModel:
    """Stacked layers, readout, and (unless embedding-only) a linear 17-way head."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        self.layers: list[LayerParams] = []
        width = c.hidden if c.variant == "ggnn" else c.in_width
        for _ in range(c.layers):
            self.layers.append(init_layer(c.variant, width, c.hidden, rng, heads=c.heads))
            width = c.hidden
        self.head: dict[str, Tensor] | None = None
        if c.task != "embed":
            self.head = {"W": _glorot(rng, c.hidden, NUM_PLANNERS), "b": _zeros(NUM_PLANNERS)}

    @property
    def task(self) -> str:
        return self.config.task

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{n}", t) for n, t in layer.parameters())
        if self.head is not None:
            out.extend((f"head.{n}", t) for n, t in self.head.items())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_parameters(self, tensors: Sequence[Tensor]) -> None:
        """Rebind parameters to the given tensor objects, in ``named_parameters`` order."""
        names = [n for n, _ in self.named_parameters()]
        if len(tensors) != len(names):
            raise ValueError(f"expected {len(names)} tensors, got {len(tensors)}")
        for name, t in zip(names, tensors):
            owner, key = name.split(".", 1)
            if owner == "head":
                self.head[key] = t
            else:
                self.layers[int(owner[5:])].tensors[key] = t

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, t in params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{n}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def embed(self, batch: GraphBatch, X: np.ndarray | Tensor) -> Tensor:
        c = self.config
        H = ad.as_tensor(X)
        if H.shape[1] != c.in_width:
            raise ValueError(f"feature width {H.shape[1]} does not match model input width {c.in_width}")
        if c.variant == "ggnn" and c.in_width < c.hidden:
            H = ad.concat([H, Tensor(np.zeros((H.shape[0], c.hidden - c.in_width)))], axis=1)
        for i, layer in enumerate(self.layers):
            last = i == len(self.layers) - 1
            H = layer_forward(layer, batch, H, activation=(not last) or c.final_activation)
        return readout(H, batch, c.readout)

    def forward(self, batch: GraphBatch, X: np.ndarray | Tensor) -> Tensor:
        pooled = self.embed(batch, X)
        if self.head is None:
            return pooled
        out = pooled @ self.head["W"] + self.head["b"]
        return out * self.config.output_scale if self.config.output_scale != 1.0 else out


def model_forward(model: GnnModel, graph: PlanningGraph, features: np.ndarray) -> Tensor:
    """Single-graph forward: 17 outputs, or the pooled embedding for embed models."""
    out = model.forward(GraphBatch([graph]), features)
    return _row(out)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.001
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


def training_targets(manifest: DatasetManifest, ids: Sequence[str], task: str) -> np.ndarray:
    rows = []
    for tid in ids:
        labels = manifest.labels(tid)
        if task == "time":
            rows.append(labels.array)
        elif task == "binary":
            rows.append(derive_binary_labels(labels).astype(np.float64))
        elif task == "multiclass":
            onehot = np.zeros(NUM_PLANNERS)
            onehot[derive_best_planner(labels)[0]] = 1.0
            rows.append(onehot)
        else:
            raise ValueError(f"task {task!r} has no training targets")
    return np.vstack(rows) if rows else np.zeros((0, NUM_PLANNERS))


class FeatureCache:
    """Feature matrices per task id, computed once per (manifest, config)."""

    def __init__(self, manifest: DatasetManifest, config: FeatureConfig):
        self.manifest = manifest
        self.config = config
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, task_id: str) -> np.ndarray:
        X = self._cache.get(task_id)
        if X is None:
            X = assemble_features(self.manifest.graph(task_id), self.manifest.vocab, self.config)
            self._cache[task_id] = X
        return X

    def batch(self, ids: Sequence[str]) -> tuple[GraphBatch, np.ndarray]:
        graphs = [self.manifest.graph(i) for i in ids]
        return GraphBatch(graphs), np.vstack([self(i) for i in ids])


@dataclass
class TrainResult:
    model: GnnModel
    history: list[float] = field(default_factory=list)

    def history_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(self.history, start=1):
            w.writerow([i, repr(loss)])
        return out.getvalue()


def train_model(model: GnnModel, manifest: DatasetManifest, train_ids: Sequence[str],
                config: TrainConfig, features: FeatureConfig | FeatureCache,
                run_id: str = "") -> TrainResult:
    """Fit ``model`` in place with Adam on the training ids.

    Time task: MSE on raw runtimes (sentinel included). Binary task: BCE on
    solvability bits. Multiclass: BCE on the one-hot fastest planner.
    """
    task = model.task
    if task == "embed":
        raise ValueError("an embedding-only model has no head to train")
    if not train_ids:
        raise ValueError("no training graphs")
    cache = features if isinstance(features, FeatureCache) else FeatureCache(manifest, features)
    ids = list(train_ids)
    Y = training_targets(manifest, ids, task)
    rng = np.random.default_rng(config.seed)
    opt = ad.Adam(model.parameters(), lr=config.lr)
    loss_fn = ad.loss_mse if task == "time" else ad.loss_bce
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(ids))
        total = 0.0
        for start in range(0, len(ids), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch, X = cache.batch([ids[i] for i in idx])
            opt.zero_grad()
            loss = loss_fn(model.forward(batch, X), Y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"{run_id or 'training'}: non-finite loss at epoch {epoch + 1}, "
                                       f"batch starting {start}")
            loss.backward()
            opt.step()
            total += value * len(idx)
        history.append(total / len(ids))
        log.debug("%s epoch %d loss %.6g", run_id, epoch + 1, history[-1])
    return TrainResult(model, history)


def predict(model: GnnModel, manifest: DatasetManifest, ids: Sequence[str],
            features: FeatureConfig | FeatureCache, batch_size: int = 64) -> np.ndarray:
    cache = features if isinstance(features, FeatureCache) else FeatureCache(manifest, features)
    rows = []
    for start in range(0, len(ids), batch_size):
        batch, X = cache.batch(ids[start:start + batch_size])
        rows.append(model.forward(batch, X).data)
    width = model.config.hidden if model.head is None else NUM_PLANNERS
    return np.vstack(rows) if rows else np.zeros((0, width))


def extract_embedding(models: GnnModel | Sequence[GnnModel], graph: PlanningGraph,
                      features: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """Pooled last-layer representation; several models are concatenated in order."""
    if isinstance(models, GnnModel):
        models, features = [models], [features]
    if len(models) != len(features):
        raise ValueError("one feature matrix per model is required")
    batch = GraphBatch([graph])
    return np.concatenate([m.embed(batch, X).data[0] for m, X in zip(models, features)])


def embed_dataset(models: Sequence[tuple[GnnModel, FeatureCache]], ids: Sequence[str],
                  batch_size: int = 64) -> np.ndarray:
    blocks = []
    for model, cache in models:
        rows = []
        for start in range(0, len(ids), batch_size):
            batch, X = cache.batch(ids[start:start + batch_size])
            rows.append(model.embed(batch, X).data)
        blocks.append(np.vstack(rows))
    return np.hstack(blocks)


# ---------------------------------------------------------------- persistence

def save_model(model: GnnModel, path: str | Path) -> None:
    """Checkpoint plus a ``.json`` sidecar with the model configuration."""
    ad.save_checkpoint(path, model.state_dict())
    Path(f"{path}.json").write_text(json.dumps(asdict(model.config), indent=2), encoding="utf-8")


def load_model(path: str | Path) -> GnnModel:
    config = ModelConfig(**json.loads(Path(f"{path}.json").read_text(encoding="utf-8")))
    model = GnnModel(config)
    model.load_state_dict(ad.load_checkpoint(path))
    return model
