"""Experiment orchestration: folds x repeats, planner selection and the GNN->boosting hybrid."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import NUM_PLANNERS, SENTINEL
from . import gbdt
from .data import (
    DatasetManifest,
    FoldSpec,
    RuntimeLabelSet,
    derive_best_planner,
    derive_binary_labels,
    feature_label_correlation,
    make_folds,
)
from .gnn import (
    FeatureCache,
    GnnModel,
    ModelConfig,
    TrainConfig,
    VARIANTS,
    embed_dataset,
    predict,
    train_model,
)
from .graph import FeatureConfig, PlanningGraph, graph_stats

log = logging.getLogger(__name__)

SELECTION_TASKS = ("time", "binary", "multiclass")
METRICS = ("solves", "matches_best")


# ---------------------------------------------------------------- selection

def select_planner(predictions: Sequence[float], task: str) -> int:
    """Index of the chosen planner; ties resolve to the lowest index."""
    p = np.asarray(predictions, dtype=np.float64)
    if p.shape != (NUM_PLANNERS,):
        raise ValueError(f"expected {NUM_PLANNERS} predictions, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite prediction")
    if task == "time":
        return int(np.argmin(p))
    if task in ("binary", "multiclass"):
        # sigmoid is monotone, so argmax over logits equals argmax over probabilities
        return int(np.argmax(p))
    raise ValueError(f"unknown task {task!r}")


def selection_accuracy(selections: Sequence[int], labels: Sequence[RuntimeLabelSet],
                       metric: str = "solves") -> float:
    if len(selections) != len(labels):
        raise ValueError("selections and labels differ in length")
    if not labels:
        return 0.0
    if metric == "solves":
        hits = [l.runtimes[s] <= l.timeout for s, l in zip(selections, labels)]
    elif metric == "matches_best":
        hits = [s == derive_best_planner(l)[0] for s, l in zip(selections, labels)]
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return float(np.mean(hits))


# ---------------------------------------------------------------- specs and reports

@dataclass
class ExperimentSpec:
    representation: str = "grounded"
    models: tuple[str, ...] = ("gcn",)
    task: str = "time"
    features: FeatureConfig = field(default_factory=FeatureConfig)
    split: str = "random"
    folds: int = 10
    repeats: int = 10
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: int = 100
    layers: int = 2
    heads: int = 4
    readout: str = "mean"
    boost: gbdt.BoostConfig | None = None
    embed_task: str = "time"
    metric: str = "solves"
    holdout: float = 0.1
    provided_folds: list[FoldSpec] | None = None

    def __post_init__(self):
        if isinstance(self.models, str):
            self.models = (self.models,)
        self.models = tuple(self.models)
        if not self.models or any(m not in VARIANTS for m in self.models):
            raise ValueError(f"models must be drawn from {VARIANTS}, got {self.models}")
        if self.task not in SELECTION_TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.embed_task not in ("time", "binary"):
            raise ValueError("embedding models are trained on the time or binary task")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.repeats < 1 or self.folds < 2:
            raise ValueError("need at least one repeat and two folds")
        if not 0.0 < self.holdout < 1.0:
            raise ValueError("holdout fraction must lie in (0, 1)")

    def config_echo(self) -> dict:
        d = {
            "representation": self.representation,
            "models": list(self.models),
            "task": self.task,
            "features": list(self.features.blocks),
            "degree_cap": self.features.degree_cap,
            "split": self.split,
            "folds": self.folds if self.provided_folds is None else len(self.provided_folds),
            "provided_splits": self.provided_folds is not None,
            "repeats": self.repeats,
            "seed": self.seed,
            "train": asdict(self.train),
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "readout": self.readout,
            "metric": self.metric,
        }
        if self.boost is not None:
            d["boost"] = asdict(self.boost)
            d["embed_task"] = self.embed_task
            d["holdout"] = self.holdout
        return d


@dataclass
class EvaluationReport:
    metric: str
    runs: list[dict]
    config: dict
    wall_clock: float = 0.0

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r["accuracy"] for r in self.runs], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean()) if self.runs else 0.0

    @property
    def std(self) -> float:
        a = self.accuracies
        return float(a.std(ddof=1)) if a.size > 1 else 0.0

    def to_dict(self) -> dict:
        return {"metric": self.metric, "mean": self.mean, "std": self.std,
                "runs": self.runs, "config": self.config}

    def to_json(self) -> str:
        # wall-clock is kept off the wire so equal seeds give byte-identical reports
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _folds_for(spec: ExperimentSpec, manifest: DatasetManifest) -> list[FoldSpec]:
    if spec.provided_folds is not None:
        return spec.provided_folds
    return make_folds(manifest, spec.split, spec.folds, spec.seed)


def _check_disjoint(fold: FoldSpec, run_id: str) -> None:
    overlap = set(fold.train_ids) & set(fold.test_ids)
    if overlap:
        raise AssertionError(f"{run_id}: test set contains training task {sorted(overlap)[0]!r}")


def _model(spec: ExperimentSpec, variant: str, width: int, task: str, seed: int) -> GnnModel:
    return GnnModel(ModelConfig(variant=variant, in_width=width, hidden=spec.hidden,
                                layers=spec.layers, readout=spec.readout, task=task,
                                heads=spec.heads, seed=seed))


def _evaluate_gnn(spec: ExperimentSpec, manifest: DatasetManifest, task: str,
                  skip_failures: bool) -> EvaluationReport:
    if manifest.representation != spec.representation:
        raise ValueError(f"manifest is {manifest.representation}, spec wants {spec.representation}")
    start = time.perf_counter()
    cache = FeatureCache(manifest, spec.features)
    width = spec.features.width(manifest.vocab)
    folds = _folds_for(spec, manifest)
    runs = []
    for r in range(spec.repeats):
        seed = spec.seed + r
        for fold in folds:
            run_id = f"repeat {r} fold {fold.fold_index}"
            _check_disjoint(fold, run_id)
            model = _model(spec, spec.models[0], width, task, seed)
            try:
                train_model(model, manifest, fold.train_ids,
                            TrainConfig(spec.train.epochs, spec.train.lr, spec.train.batch_size, seed),
                            cache, run_id=run_id)
            except Exception:
                if not skip_failures:
                    raise
                log.warning("%s failed; skipped", run_id, exc_info=True)
                continue
            test = list(fold.test_ids)
            preds = predict(model, manifest, test, cache)
            selections = [select_planner(p, task) for p in preds]
            acc = selection_accuracy(selections, [manifest.labels(t) for t in test], spec.metric)
            log.info("%s accuracy %.4f", run_id, acc)
            runs.append({"repeat": r, "fold": fold.fold_index, "accuracy": acc})
    return EvaluationReport(spec.metric, runs, spec.config_echo(), time.perf_counter() - start)


def run_experiment(spec: ExperimentSpec, manifest: DatasetManifest,
                   skip_failures: bool = False) -> EvaluationReport:
    """GNN-only selection (time or binary) over every (repeat, fold)."""
    if spec.task == "multiclass":
        if spec.boost is None:
            raise ValueError("multiclass selection runs through the embedding + boosting path")
        return embed_and_boost(spec, manifest, skip_failures)
    if spec.boost is not None:
        return embed_and_boost(spec, manifest, skip_failures)
    return _evaluate_gnn(spec, manifest, spec.task, skip_failures)


def gnn_multiclass_baseline(spec: ExperimentSpec, manifest: DatasetManifest,
                            skip_failures: bool = False) -> EvaluationReport:
    """GNN trained directly on the one-hot fastest planner (BCE), selecting the argmax.

    Serves as the paired baseline for the boosted softmax path.
    """
    return _evaluate_gnn(spec, manifest, "multiclass", skip_failures)


def _holdout_split(ids: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    ids = list(ids)
    if len(ids) < 2:
        return ids, []
    n_hold = min(max(1, int(round(fraction * len(ids)))), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    hold = set(order[:n_hold].tolist())
    return ([t for i, t in enumerate(ids) if i not in hold],
            [t for i, t in enumerate(ids) if i in hold])


def boost_targets(manifest: DatasetManifest, ids: Sequence[str], task: str) -> np.ndarray:
    if task == "time":
        return np.vstack([manifest.labels(t).array for t in ids])
    if task == "binary":
        return np.vstack([derive_binary_labels(manifest.labels(t)) for t in ids]).astype(np.float64)
    return np.array([derive_best_planner(manifest.labels(t))[0] for t in ids], dtype=np.float64)


def fit_selector(task: str, X: np.ndarray, Y: np.ndarray, config: gbdt.BoostConfig,
                 validation: tuple[np.ndarray, np.ndarray] | None):
    if task == "time":
        return gbdt.fit_per_output(X, Y, gbdt.BoostConfig(**{**asdict(config), "objective": "squared",
                                                              "num_class": 1}), validation)
    if task == "binary":
        return gbdt.fit_per_output(X, Y, gbdt.BoostConfig(**{**asdict(config), "objective": "logistic",
                                                              "num_class": 1}), validation)
    return gbdt.boost_fit(X, Y, gbdt.BoostConfig(**{**asdict(config), "objective": "softmax",
                                                    "num_class": NUM_PLANNERS}), validation)


def selector_scores(selector, X: np.ndarray) -> np.ndarray:
    if isinstance(selector, list):
        return np.column_stack([gbdt.predict(e, X) for e in selector])
    return gbdt.predict(selector, X)


def embed_and_boost(spec: ExperimentSpec, manifest: DatasetManifest,
                    skip_failures: bool = False) -> EvaluationReport:
    """Train GNN embedder(s) per fold, then boosted trees on their pooled embeddings."""
    if manifest.representation != spec.representation:
        raise ValueError(f"manifest is {manifest.representation}, spec wants {spec.representation}")
    boost = spec.boost or gbdt.BoostConfig()
    start = time.perf_counter()
    cache = FeatureCache(manifest, spec.features)
    width = spec.features.width(manifest.vocab)
    folds = _folds_for(spec, manifest)
    runs = []
    for r in range(spec.repeats):
        seed = spec.seed + r
        for fold in folds:
            run_id = f"repeat {r} fold {fold.fold_index}"
            _check_disjoint(fold, run_id)
            try:
                embedders = []
                for m_i, variant in enumerate(spec.models):
                    model = _model(spec, variant, width, spec.embed_task, seed + 7919 * m_i)
                    train_model(model, manifest, fold.train_ids,
                                TrainConfig(spec.train.epochs, spec.train.lr, spec.train.batch_size, seed),
                                cache, run_id=f"{run_id} {variant}")
                    embedders.append((model, cache))
                fit_ids, hold_ids = _holdout_split(fold.train_ids, spec.holdout, seed)
                X_fit = embed_dataset(embedders, fit_ids)
                X_hold = embed_dataset(embedders, hold_ids) if hold_ids else None
                validation = None
                if X_hold is not None:
                    validation = (X_hold, boost_targets(manifest, hold_ids, spec.task))
                selector = fit_selector(spec.task, X_fit, boost_targets(manifest, fit_ids, spec.task),
                                        boost, validation)
            except Exception:
                if not skip_failures:
                    raise
                log.warning("%s failed; skipped", run_id, exc_info=True)
                continue
            test = list(fold.test_ids)
            scores = selector_scores(selector, embed_dataset(embedders, test))
            selections = [select_planner(s, spec.task) for s in scores]
            acc = selection_accuracy(selections, [manifest.labels(t) for t in test], spec.metric)
            log.info("%s boosted accuracy %.4f", run_id, acc)
            runs.append({"repeat": r, "fold": fold.fold_index, "accuracy": acc})
    config = spec.config_echo()
    config["embedding_width"] = spec.hidden * len(spec.models)
    return EvaluationReport(spec.metric, runs, config, time.perf_counter() - start)


# ---------------------------------------------------------------- statistics

def report_stats(manifest: DatasetManifest, config: FeatureConfig | None = None) -> dict:
    """Plot-ready graph sizes, per-type average degree and the correlation matrix."""
    per_graph = []
    type_degree_sum: dict[int, float] = {}
    type_count: dict[int, int] = {}
    for e in manifest.entries:
        g = manifest.graph(e.task_id)
        s = graph_stats(g)
        per_graph.append({"task_id": e.task_id, "domain": e.domain, "nodes": s.num_nodes,
                          "edges": s.num_edges, "avg_in_degree": s.avg_in_degree})
        total = g.in_degree() + g.out_degree()
        for t in np.unique(g.node_types):
            mask = g.node_types == t
            type_degree_sum[int(t)] = type_degree_sum.get(int(t), 0.0) + float(total[mask].sum())
            type_count[int(t)] = type_count.get(int(t), 0) + int(mask.sum())
    names = manifest.vocab.names
    per_type = [{"type": t, "name": names[t], "nodes": type_count[t],
                 "avg_degree": type_degree_sum[t] / type_count[t]} for t in sorted(type_count)]
    out = {
        "representation": manifest.representation,
        "num_graphs": len(manifest),
        "graphs": per_graph,
        "mean_avg_degree": float(np.mean([g["avg_in_degree"] for g in per_graph])) if per_graph else 0.0,
        "max_nodes": max((g["nodes"] for g in per_graph), default=0),
        "max_edges": max((g["edges"] for g in per_graph), default=0),
        "per_type_avg_degree": per_type,
    }
    if len(manifest) >= 3:
        out["correlation"] = feature_label_correlation(manifest, manifest.vocab, config).to_dict()
    return out


# ---------------------------------------------------------------- synthetic data

def make_synthetic_benchmark(num_graphs: int = 300, representation: str = "grounded",
                             portfolio: int = 3, num_domains: int = 20, min_nodes: int = 20,
                             max_nodes: int = 60, edge_factor: float = 2.0,
                             seed: int = 0) -> DatasetManifest:
    """Random typed graphs whose fastest planner is ``majority_type % portfolio``.

    The fastest planner solves in 1-100 s; every other planner hits the
    sentinel, so picking the right planner is the only way to solve a task.
    """
    from .graph import vocab_for

    rng = np.random.default_rng(seed)
    k = vocab_for(representation).size
    graphs, labels = [], []
    for i in range(num_graphs):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        major = int(rng.integers(k))
        n_major = int(np.ceil(n * rng.uniform(0.5, 0.7)))
        others = rng.choice([t for t in range(k) if t != major], size=n - n_major)
        types = rng.permutation(np.concatenate([np.full(n_major, major), others]))
        m = int(edge_factor * n)
        edges = rng.integers(0, n, size=(m, 2))
        tid = f"task{i:04d}"
        dom = f"domain{i % num_domains:02d}"
        graphs.append(PlanningGraph(tid, dom, representation, types, edges))
        runtimes = np.full(NUM_PLANNERS, SENTINEL)
        runtimes[major % portfolio] = float(np.round(rng.uniform(1.0, 100.0), 3))
        labels.append(RuntimeLabelSet(tid, dom, tuple(runtimes.tolist())))
    return DatasetManifest.from_memory(graphs, labels)
