"""Random-forest classifiers for cut filtering, their metrics and the training gate."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .cutml import LabeledDataset, ThresholdLadder

log = logging.getLogger("bendml")

MODEL_SCHEMA = 1
GATE = 0.92
HOLDOUT = 0.2


class SingleClassError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 8
    max_features: int | None = None  # None: ceil(sqrt(width))
    min_leaf: int = 2

    def features_for(self, width: int) -> int:
        return min(width, self.max_features or math.ceil(math.sqrt(width)))


# ---------------------------------------------------------------------------
# trees

@dataclass
class Tree:
    """Flat binary tree; ``feature < 0`` marks a leaf.  Rows go left when x <= threshold."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # class-1 probability at each node
    importance: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def depth(self) -> int:
        depth = np.zeros(self.feature.size, dtype=int)
        for i in range(self.feature.size):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max(initial=0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            go_left = X[rows[inner], f[inner]] <= self.threshold[node[inner]]
            node[inner] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=int), np.array(d["threshold"], dtype=float),
                   np.array(d["left"], dtype=int), np.array(d["right"], dtype=int),
                   np.array(d["value"], dtype=float))


def _gini(pos: np.ndarray, n: np.ndarray) -> np.ndarray:
    p = pos / n
    return 2.0 * p * (1.0 - p)


def _best_split(X: np.ndarray, y: np.ndarray, feats: np.ndarray, min_leaf: int):
    """Best Gini split of rows (X, y) over ``feats``: (gain, feature, threshold) or None."""
    n = y.size
    total_pos = y.sum()
    parent = _gini(np.array(total_pos, dtype=float), np.array(n, dtype=float))
    best = None
    for f in feats:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        cum = np.cumsum(ys)[:-1]
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        nl = n_left[valid].astype(float)
        pl = cum[valid].astype(float)
        child = (nl * _gini(pl, nl) + (n - nl) * _gini(total_pos - pl, n - nl)) / n
        j = int(np.argmin(child))
        gain = parent - child[j]
        if best is None or gain > best[0] + 1e-15:
            pos = np.flatnonzero(valid)[j]
            best = (float(gain), int(f), float(0.5 * (xs[pos] + xs[pos + 1])))
    return best


def build_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator,
               max_features: int | None = None) -> Tree:
    width = X.shape[1]
    k = max_features if max_features is not None else params.features_for(width)
    feature, threshold, left, right, value = [], [], [], [], []
    importance = np.zeros(width)
    n_root = y.size

    def new_node(rows):
        feature.append(-1), threshold.append(0.0), left.append(-1), right.append(-1)
        value.append(float(y[rows].mean()) if rows.size else 0.0)
        return len(feature) - 1

    stack = [(new_node(np.arange(y.size)), np.arange(y.size), 0)]
    while stack:
        node, rows, depth = stack.pop()
        yr = y[rows]
        if depth >= params.max_depth or rows.size < 2 * params.min_leaf or yr.min() == yr.max():
            continue
        feats = np.sort(rng.choice(width, size=k, replace=False))
        split = _best_split(X[rows], yr, feats, params.min_leaf)
        if split is None or split[0] <= 0.0:
            continue
        gain, f, thr = split
        mask = X[rows, f] <= thr
        lrows, rrows = rows[mask], rows[~mask]
        importance[f] += gain * rows.size / n_root
        feature[node], threshold[node] = f, thr
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], rrows, depth + 1))
        stack.append((left[node], lrows, depth + 1))
    return Tree(np.array(feature, dtype=int), np.array(threshold, dtype=float), np.array(left, dtype=int),
                np.array(right, dtype=int), np.array(value, dtype=float), importance)


@dataclass
class BinaryClassifier:
    trees: list[Tree]
    width: int
    params: ForestParams = field(default_factory=ForestParams)
    seed: int = 0

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.width:
            raise ValueError(f"feature width {X.shape[1]} does not match classifier width {self.width}")
        total = np.zeros(X.shape[0])
        for t in self.trees:
            total += t.predict_proba(X)
        return total / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    def feature_importances(self) -> np.ndarray:
        imp = np.zeros(self.width)
        for t in self.trees:
            if t.importance.size:
                s = t.importance.sum()
                if s > 0:
                    imp += t.importance / s
        s = imp.sum()
        return imp / s if s > 0 else imp

    def to_dict(self) -> dict:
        return {"width": self.width, "seed": self.seed, "n_trees": self.params.n_trees,
                "max_depth": self.params.max_depth, "max_features": self.params.max_features,
                "min_leaf": self.params.min_leaf, "importances": self.feature_importances().tolist(),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "BinaryClassifier":
        params = ForestParams(int(d["n_trees"]), int(d["max_depth"]), d["max_features"], int(d["min_leaf"]))
        trees = [Tree.from_dict(t) for t in d["trees"]]
        imp = np.array(d.get("importances", []), dtype=float)
        for t in trees:
            t.importance = imp
        return cls(trees, int(d["width"]), params, int(d["seed"]))


def classify(clf: BinaryClassifier, features) -> tuple[int, float]:
    """Label and score of one feature vector."""
    score = float(clf.predict_proba(np.asarray(features, dtype=float)[None, :])[0])
    return int(score >= 0.5), score


def train_forest(X, y, params: ForestParams = ForestParams(), seed: int = 0) -> BinaryClassifier:
    """Bootstrap-aggregated Gini trees, deterministic for a given seed."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be 2-D with one row per label")
    if y.size < 2 * params.min_leaf:
        raise ValueError(f"need at least {2 * params.min_leaf} rows, got {y.size}")
    if np.all(X == X[0]):
        log.warning("all feature rows are identical; trees reduce to single leaves")
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(params.n_trees):
        idx = rng.integers(0, y.size, y.size)
        trees.append(build_tree(X[idx], y[idx], params, rng))
    return BinaryClassifier(trees, X.shape[1], params, seed)


# ---------------------------------------------------------------------------
# metrics

def _check_labels(labels: np.ndarray):
    if labels.size == 0 or labels.min() == labels.max():
        raise SingleClassError("both classes must be present in the labels")


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count one half)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    _check_labels(y)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision at each distinct score threshold, starting at (0, 1)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    _check_labels(y)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    recall = tp[last] / y.sum()
    precision = tp[last] / (tp[last] + fp[last])
    return np.r_[0.0, recall], np.r_[1.0, precision]


def pr_auc(scores, labels) -> float:
    recall, precision = pr_curve(scores, labels)
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))


# ---------------------------------------------------------------------------
# data handling and the gate

def undersample(ds: LabeledDataset, seed: int) -> LabeledDataset:
    """Balance classes by dropping uniformly chosen majority rows."""
    y = ds.y
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise SingleClassError(f"{ds.cpi} dataset {ds.index} has a single class; "
                               "use another threshold or sample more iterations")
    rng = np.random.default_rng(seed)
    if pos.size > neg.size:
        pos = np.sort(rng.choice(pos, size=neg.size, replace=False))
    elif neg.size > pos.size:
        neg = np.sort(rng.choice(neg, size=pos.size, replace=False))
    keep = np.sort(np.concatenate([pos, neg]))
    return LabeledDataset(ds.cpi, ds.index, ds.threshold, ds.feature_names, ds.X[keep], y[keep])


def stratified_split(y: np.ndarray, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == cls))
        n_test = max(1, int(round(holdout * idx.size))) if idx.size > 1 else 0
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass
class TrainedClassifier:
    index: int
    threshold: float
    classifier: BinaryClassifier
    roc_auc: float
    pr_auc: float
    seconds: float = 0.0


@dataclass
class ClassifierEnsemble:
    cpi: str
    ladder: ThresholdLadder
    feature_names: tuple[str, ...]
    members: list[TrainedClassifier]  # strictest first

    @property
    def width(self) -> int:
        return len(self.feature_names)

    def classifiers(self) -> list[BinaryClassifier]:
        return [t.classifier for t in self.members]


@dataclass
class GateFailure:
    cpi: str
    reason: str
    metrics: dict = field(default_factory=dict)


def median_index(n: int) -> int:
    return math.ceil(n / 2)


def _fit_one(ds: LabeledDataset, params: ForestParams, seed: int) -> TrainedClassifier:
    t0 = time.perf_counter()
    bal = undersample(ds, seed)
    tr, te = stratified_split(bal.y, HOLDOUT, seed + 1)
    clf = train_forest(bal.X[tr], bal.y[tr], params, seed + 2)
    scores = clf.predict_proba(bal.X[te])
    roc, pr = roc_auc(scores, bal.y[te]), pr_auc(scores, bal.y[te])
    return TrainedClassifier(ds.index, ds.threshold, clf, roc, pr, time.perf_counter() - t0)


def train_ensemble(datasets: Sequence[LabeledDataset], ladder: ThresholdLadder, roc_min: float = GATE,
                   pr_min: float = GATE, seed: int = 0, params: ForestParams = ForestParams()
                   ) -> ClassifierEnsemble | GateFailure:
    """Gate on the strictest, median and loosest classifiers, then train the rest."""
    n = len(datasets)
    if n == 0:
        raise ValueError("no datasets")
    cpi = datasets[0].cpi
    first = sorted({1, median_index(n), n})
    trained: dict[int, TrainedClassifier] = {}
    for i in first:
        try:
            trained[i] = _fit_one(datasets[i - 1], params, seed + 1000 * i)
        except SingleClassError as exc:
            return GateFailure(cpi, str(exc))
    metrics = {i: (t.roc_auc, t.pr_auc) for i, t in trained.items()}
    bad = [i for i, (roc, pr) in metrics.items() if roc < roc_min or pr < pr_min]
    if bad:
        return GateFailure(cpi, f"held-out metrics below gate for classifiers {bad}", metrics)
    for i in range(1, n + 1):
        if i not in trained:
            try:
                trained[i] = _fit_one(datasets[i - 1], params, seed + 1000 * i)
            except SingleClassError as exc:
                return GateFailure(cpi, str(exc))
    return ClassifierEnsemble(cpi, ladder, tuple(datasets[0].feature_names),
                              [trained[i] for i in range(1, n + 1)])


# ---------------------------------------------------------------------------
# persistence

def ensemble_to_dict(ens: ClassifierEnsemble, producer: dict | None = None) -> dict:
    return {"schema": MODEL_SCHEMA, "kind": "classifier-ensemble", "cpi": ens.cpi,
            "ladder": list(ens.ladder.thetas), "feature_names": list(ens.feature_names),
            "producer": producer or {},
            "members": [{"index": t.index, "threshold": t.threshold, "roc_auc": t.roc_auc, "pr_auc": t.pr_auc,
                         "classifier": t.classifier.to_dict()} for t in ens.members]}


def ensemble_from_dict(d: dict) -> ClassifierEnsemble:
    if not isinstance(d, dict) or d.get("kind") != "classifier-ensemble":
        raise ValueError("not a classifier-ensemble model file")
    if d.get("schema") != MODEL_SCHEMA:
        raise ValueError(f"unsupported model schema {d.get('schema')!r}")
    try:
        cpi = d["cpi"]
        ladder = ThresholdLadder(cpi, tuple(float(t) for t in d["ladder"]))
        names = tuple(d["feature_names"])
        members = [TrainedClassifier(int(m["index"]), float(m["threshold"]),
                                     BinaryClassifier.from_dict(m["classifier"]), float(m["roc_auc"]),
                                     float(m["pr_auc"])) for m in d["members"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed model file: {exc!r}") from exc
    for m in members:
        if m.classifier.width != len(names):
            raise ValueError(f"classifier {m.index} width {m.classifier.width} != {len(names)} feature names")
    return ClassifierEnsemble(cpi, ladder, names, members)


def save_ensemble(ens: ClassifierEnsemble, path: str | Path, producer: dict | None = None):
    Path(path).write_text(json.dumps(ensemble_to_dict(ens, producer)) + "\n", encoding="utf-8")


def load_ensemble(path: str | Path) -> ClassifierEnsemble:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot load model {path}: {exc}") from exc
    return ensemble_from_dict(data)
