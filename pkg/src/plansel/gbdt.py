"""Second-order gradient boosted regression trees with exact greedy splits.

Each round fits a tree to per-sample gradients ``g`` and hessians ``h`` of the
loss at the current margins. A leaf holding samples ``I`` gets weight
``-G/(H + lambda)`` and a split is scored by

    gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma

which is the reduction in the regularised second-order objective.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

OBJECTIVES = ("squared", "logistic", "softmax")
FORMAT_MAGIC = "PSGB"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BoostConfig:
    rounds: int = 500
    max_depth: int = 5
    learning_rate: float = 0.01
    reg_lambda: float = 1.0
    gamma: float = 0.0
    patience: int = 20
    objective: str = "squared"
    num_class: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be non-negative")
        if self.max_depth < 0:
            raise ValueError("max depth must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "softmax" and self.num_class < 2:
            raise ValueError("softmax needs at least 2 classes")


# ---------------------------------------------------------------- objectives

def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softmax(margins: np.ndarray) -> np.ndarray:
    z = margins - margins.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _class_labels(y: np.ndarray, num_class: int) -> np.ndarray:
    yi = np.asarray(y)
    if yi.ndim != 1 or np.any(yi != np.round(yi)) or np.any((yi < 0) | (yi >= num_class)):
        raise ValueError(f"class labels must be integers in [0, {num_class})")
    return yi.astype(np.int64)


def grad_hess(objective: str, y, margin) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    margin = np.asarray(margin, dtype=np.float64)
    if objective == "squared":
        if y.shape != margin.shape:
            raise ValueError("target and prediction shapes differ")
        return margin - y, np.ones_like(margin)
    if objective == "logistic":
        if y.shape != margin.shape:
            raise ValueError("target and prediction shapes differ")
        if np.any((y != 0) & (y != 1)):
            raise ValueError("logistic targets must be 0 or 1")
        p = _sigmoid(margin)
        return p - y, p * (1.0 - p)
    if objective == "softmax":
        if margin.ndim != 2 or margin.shape[0] != y.shape[0]:
            raise ValueError("softmax margins must be (samples, classes)")
        labels = _class_labels(y, margin.shape[1])
        p = _softmax(margin)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(labels)), labels] = 1.0
        return p - onehot, p * (1.0 - p)
    raise ValueError(f"unknown objective {objective!r}")


def objective_loss(objective: str, y, margin) -> float:
    y = np.asarray(y, dtype=np.float64)
    margin = np.asarray(margin, dtype=np.float64)
    if objective == "squared":
        return float(np.mean((margin - y) ** 2))
    if objective == "logistic":
        s = -margin * (2.0 * y - 1.0)
        return float(np.mean(np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))))
    labels = _class_labels(y, margin.shape[1])
    z = margin - margin.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


# ---------------------------------------------------------------- trees

@dataclass
class RegressionTree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf with weight ``value[i]``.

    Rows with ``x[feature] < threshold`` go left.
    """
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    @property
    def num_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def num_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index reached by each row."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            r, nd = rows[active], node[active]
            go_left = X[r, f[active]] < self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


def _leaf_weight(G: float, H: float, lam: float) -> float:
    denom = H + lam
    return -G / denom if denom > 0 else 0.0


def _score(G, H, lam):
    denom = H + lam
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, G * G / np.where(denom > 0, denom, 1.0), 0.0)


def best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, rows: np.ndarray,
               sorted_rows: np.ndarray, reg_lambda: float, gamma: float):
    """Exact greedy search over all features for the rows in ``rows``.

    ``sorted_rows`` is the (features, n) matrix of all row indices sorted by
    each feature; it is filtered to the node's rows without re-sorting.
    Returns ``(gain, feature, threshold)`` or ``None`` when nothing beats 0.
    """
    n_feat = X.shape[1]
    k = rows.size
    if k < 2 or n_feat == 0:
        return None
    member = np.zeros(X.shape[0], dtype=bool)
    member[rows] = True
    keep = member[sorted_rows]
    order = sorted_rows[keep].reshape(n_feat, k)
    vals = X[order, np.arange(n_feat)[:, None]]
    GL = np.cumsum(g[order], axis=1)[:, :-1]
    HL = np.cumsum(h[order], axis=1)[:, :-1]
    G = g[rows].sum()
    H = h[rows].sum()
    GR, HR = G - GL, H - HL
    gains = 0.5 * (_score(GL, HL, reg_lambda) + _score(GR, HR, reg_lambda)
                   - _score(np.float64(G), np.float64(H), reg_lambda)) - gamma
    distinct = vals[:, :-1] < vals[:, 1:]
    gains = np.where(distinct, gains, -np.inf)
    flat = int(np.argmax(gains))
    f, pos = divmod(flat, k - 1)
    best = gains[f, pos]
    if not best > 0:
        return None
    return float(best), int(f), float((vals[f, pos] + vals[f, pos + 1]) / 2.0)


def fit_tree(X, g, h, max_depth: int = 5, reg_lambda: float = 1.0, gamma: float = 0.0,
             sorted_rows: np.ndarray | None = None) -> RegressionTree:
    X = np.asarray(X, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != g.size or g.shape != h.shape:
        raise ValueError("features, gradients and hessians must agree on sample count")
    if X.shape[0] < 1:
        raise ValueError("need at least one sample")
    if sorted_rows is None:
        sorted_rows = np.argsort(X, axis=0, kind="stable").T
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(X.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        split = None
        if depth < max_depth:
            split = best_split(X, g, h, rows, sorted_rows, reg_lambda, gamma)
        if split is None:
            value[node] = _leaf_weight(g[rows].sum(), h[rows].sum(), reg_lambda)
            continue
        _, f, thr = split
        goes_left = X[rows, f] < thr
        l, r = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, thr, l, r
        stack.append((r, rows[~goes_left], depth + 1))
        stack.append((l, rows[goes_left], depth + 1))
    return RegressionTree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                          np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                          np.asarray(value), max_depth)


# ---------------------------------------------------------------- ensembles

@dataclass
class BoostedEnsemble:
    config: BoostConfig
    base_score: np.ndarray
    trees: list[list[RegressionTree]] = field(default_factory=list)
    best_round: int = 0
    num_features: int = 0
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)

    @property
    def num_outputs(self) -> int:
        return self.config.num_class if self.config.objective == "softmax" else 1

    def margin(self, X, rounds: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.num_features:
            raise ValueError(f"expected {self.num_features} features, got shape {X.shape}")
        rounds = self.best_round if rounds is None else rounds
        out = np.tile(self.base_score, (X.shape[0], 1))
        for per_class in self.trees[:rounds]:
            for c, tree in enumerate(per_class):
                out[:, c] += self.config.learning_rate * tree.predict(X)
        return out if self.num_outputs > 1 else out[:, 0]


def predict(ensemble: BoostedEnsemble, X) -> np.ndarray:
    m = ensemble.margin(X)
    obj = ensemble.config.objective
    if obj == "squared":
        return m
    if obj == "logistic":
        return _sigmoid(m)
    return _softmax(m)


def boost_fit(X, y, config: BoostConfig = BoostConfig(),
              validation: tuple[np.ndarray, np.ndarray] | None = None) -> BoostedEnsemble:
    """Fit rounds sequentially; with validation data, keep the best round and
    stop after ``patience`` rounds without improvement."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X rows must match y length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training inputs")
    obj = config.objective
    if obj == "softmax":
        _class_labels(y, config.num_class)
        base = np.zeros(config.num_class)
    elif obj == "logistic":
        base = np.zeros(1)
    else:
        base = np.array([y.mean()])
    ens = BoostedEnsemble(config, base, num_features=X.shape[1])
    n_out = ens.num_outputs

    def shaped(margin):
        return margin if n_out > 1 else margin[:, 0]

    margin = np.tile(base, (X.shape[0], 1))
    sorted_rows = np.argsort(X, axis=0, kind="stable").T
    if validation is not None:
        Xv = np.asarray(validation[0], dtype=np.float64)
        yv = np.asarray(validation[1], dtype=np.float64)
        if not (np.all(np.isfinite(Xv)) and np.all(np.isfinite(yv))):
            raise ValueError("non-finite validation inputs")
        vmargin = np.tile(base, (Xv.shape[0], 1))
        best_loss = objective_loss(obj, yv, shaped(vmargin))
        ens.valid_loss.append(best_loss)
    ens.train_loss.append(objective_loss(obj, y, shaped(margin)))

    for t in range(1, config.rounds + 1):
        g, h = grad_hess(obj, y, shaped(margin))
        g, h = g.reshape(len(y), n_out), h.reshape(len(y), n_out)
        round_trees = []
        for c in range(n_out):
            tree = fit_tree(X, g[:, c], h[:, c], config.max_depth, config.reg_lambda,
                            config.gamma, sorted_rows)
            margin[:, c] += config.learning_rate * tree.predict(X)
            if validation is not None:
                vmargin[:, c] += config.learning_rate * tree.predict(Xv)
            round_trees.append(tree)
        ens.trees.append(round_trees)
        ens.train_loss.append(objective_loss(obj, y, shaped(margin)))
        if validation is None:
            ens.best_round = t
            continue
        loss = objective_loss(obj, yv, shaped(vmargin))
        ens.valid_loss.append(loss)
        if loss < best_loss:
            best_loss, ens.best_round = loss, t
        elif t - ens.best_round >= config.patience:
            break
    return ens


def fit_per_output(X, Y, config: BoostConfig,
                   validation: tuple[np.ndarray, np.ndarray] | None = None) -> list[BoostedEnsemble]:
    """One independent single-output ensemble per column of ``Y``."""
    Y = np.asarray(Y, dtype=np.float64)
    out = []
    for j in range(Y.shape[1]):
        val = None if validation is None else (validation[0], np.asarray(validation[1])[:, j])
        out.append(boost_fit(X, Y[:, j], config, val))
    return out


# ---------------------------------------------------------------- serialization

def dumps(ensemble: BoostedEnsemble) -> str:
    c = ensemble.config
    out = io.StringIO()
    out.write(f"{FORMAT_MAGIC} {FORMAT_VERSION}\n")
    out.write(f"objective {c.objective}\nnum_class {c.num_class}\n")
    out.write(f"rounds {c.rounds}\nmax_depth {c.max_depth}\nlearning_rate {c.learning_rate!r}\n")
    out.write(f"lambda {c.reg_lambda!r}\ngamma {c.gamma!r}\npatience {c.patience}\n")
    out.write(f"num_features {ensemble.num_features}\n")
    out.write("base_score " + " ".join(repr(float(b)) for b in ensemble.base_score) + "\n")
    out.write(f"best_round {ensemble.best_round}\n")
    out.write(f"trees {sum(len(r) for r in ensemble.trees)}\n")
    for t, per_class in enumerate(ensemble.trees):
        for k, tree in enumerate(per_class):
            out.write(f"tree {t} {k} {tree.num_nodes}\n")
            for i in range(tree.num_nodes):
                if tree.feature[i] < 0:
                    out.write(f"leaf {float(tree.value[i])!r}\n")
                else:
                    out.write(f"node {tree.feature[i]} {float(tree.threshold[i])!r} "
                              f"{tree.left[i]} {tree.right[i]}\n")
    return out.getvalue()


def loads(text: str) -> BoostedEnsemble:
    lines = iter(text.splitlines())

    def field_(name):
        parts = next(lines).split()
        if not parts or parts[0] != name:
            raise ValueError(f"expected '{name}' line, got {parts!r}")
        return parts[1:]

    head = next(lines).split()
    if head != [FORMAT_MAGIC, str(FORMAT_VERSION)]:
        raise ValueError(f"not a {FORMAT_MAGIC} v{FORMAT_VERSION} ensemble")
    objective = field_("objective")[0]
    num_class = int(field_("num_class")[0])
    rounds = int(field_("rounds")[0])
    max_depth = int(field_("max_depth")[0])
    lr = float(field_("learning_rate")[0])
    lam = float(field_("lambda")[0])
    gamma = float(field_("gamma")[0])
    patience = int(field_("patience")[0])
    config = BoostConfig(rounds, max_depth, lr, lam, gamma, patience, objective, num_class)
    num_features = int(field_("num_features")[0])
    base = np.array([float(b) for b in field_("base_score")])
    best_round = int(field_("best_round")[0])
    count = int(field_("trees")[0])
    trees: list[list[RegressionTree]] = []
    for _ in range(count):
        t, _k, n = (int(x) for x in field_("tree"))
        feat, thr, lft, rgt, val = [], [], [], [], []
        for _ in range(n):
            parts = next(lines).split()
            if parts[0] == "leaf":
                feat.append(-1), thr.append(0.0), lft.append(-1), rgt.append(-1)
                val.append(float(parts[1]))
            else:
                feat.append(int(parts[1])), thr.append(float(parts[2]))
                lft.append(int(parts[3])), rgt.append(int(parts[4])), val.append(0.0)
        tree = RegressionTree(np.asarray(feat, dtype=np.int64), np.asarray(thr),
                              np.asarray(lft, dtype=np.int64), np.asarray(rgt, dtype=np.int64),
                              np.asarray(val), max_depth)
        while len(trees) <= t:
            trees.append([])
        trees[t].append(tree)
    return BoostedEnsemble(config, base, trees, best_round, num_features)
