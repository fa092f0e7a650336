"""
Random forest with Gini splits, and a one-vs-rest logistic-regression head.

Trees are stored as flat node arrays (``feature == -1`` marks a leaf):

    feature   int32   split feature per node
    threshold float64 go left when x[feature] <= threshold
    left      int32   child indices
    right     int32
    value     float64 (nodes, classes) training class counts

Forest file::

    b"KTNF" | u16 version | u32 meta_len | meta JSON (config, n_features, n_classes)
    u32 n_trees, then per tree the five arrays above

Linear head file::

    b"KTNL" | u16 version | u32 meta_len | meta JSON (n_features, n_classes, config)
    weights f8 (C, d) | bias f8 (C,) | mean f8 (d,) | scale f8 (d,)
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import structlog

from .config import ForestConfig, LogRegConfig
from .exceptions import DatasetError, FormatError, ShapeError
from .formats import BinaryReader, BinaryWriter
from .seeding import derive_rng

log = structlog.get_logger(__name__)

FOREST_MAGIC = b"KTNF"
FOREST_VERSION = 1
LINEAR_MAGIC = b"KTNL"
LINEAR_VERSION = 1

LEAF = -1


def gini(class_counts) -> float:
    counts = np.asarray(class_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0 or np.any(counts < 0):
        raise DatasetError(f"gini needs non-negative counts with a positive total, got {counts.tolist()}")
    p = counts / total
    return float(1.0 - np.sum(p * p))


def _gini_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1)
    p = counts / np.maximum(totals, 1.0)[:, None]
    return 1.0 - np.sum(p * p, axis=1)


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.feature.shape[0])

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] != LEAF
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] != LEAF
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        counts = self.value[self.leaf_index(X)]
        return counts / counts.sum(axis=1, keepdims=True)


def _best_split(X: np.ndarray, y_onehot: np.ndarray, idx: np.ndarray, features: np.ndarray,
                min_leaf: int) -> Optional[Tuple[int, float]]:
    """Lowest weighted child impurity over ``features``; ties keep the lowest feature, then threshold."""
    n = idx.size
    best: Optional[Tuple[int, float]] = None
    best_score = np.inf
    for f in np.sort(features):
        order = np.argsort(X[idx, f], kind="stable")
        xs = X[idx[order], f]
        left_counts = np.cumsum(y_onehot[idx[order]], axis=0)[:-1]
        n_left = np.arange(1, n, dtype=np.float64)
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        right_counts = left_counts[-1] + y_onehot[idx[order[-1]]] - left_counts
        score = (n_left * _gini_rows(left_counts) + (n - n_left) * _gini_rows(right_counts)) / n
        score = np.where(valid, score, np.inf)
        pos = int(np.argmin(score))
        if score[pos] < best_score:
            best_score = score[pos]
            threshold = 0.5 * (xs[pos] + xs[pos + 1])
            if threshold >= xs[pos + 1]:
                threshold = xs[pos]
            best = (int(f), float(threshold))
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, cfg: ForestConfig, rng: np.random.Generator) -> Tree:
    n, d = X.shape
    idx = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
    y_onehot = np.eye(n_classes)[y]
    k = cfg.features_per_split(d)

    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[np.ndarray] = []

    def new_node(rows: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(y_onehot[rows].sum(axis=0))
        return len(feature) - 1

    stack = [(new_node(idx), idx, 0)]
    while stack:
        node, rows, depth = stack.pop()
        counts = value[node]
        if np.count_nonzero(counts) <= 1 or rows.size < 2 * cfg.min_samples_leaf:
            continue
        if cfg.max_depth and depth >= cfg.max_depth:
            continue
        subset = rng.choice(d, size=k, replace=False)
        split = _best_split(X, y_onehot, rows, subset, cfg.min_samples_leaf)
        if split is None and k < d:
            split = _best_split(X, y_onehot, rows, np.arange(d), cfg.min_samples_leaf)
        if split is None:
            continue
        f, t = split
        mask = X[rows, f] <= t
        feature[node], threshold[node] = f, t
        left[node] = new_node(rows[mask])
        right[node] = new_node(rows[~mask])
        stack.append((right[node], rows[~mask], depth + 1))
        stack.append((left[node], rows[mask], depth + 1))

    return Tree(np.array(feature, np.int32), np.array(threshold, np.float64), np.array(left, np.int32),
                np.array(right, np.int32), np.array(value, np.float64))


@dataclass
class ForestModel:
    trees: List[Tree]
    n_features: int
    n_classes: int
    config: ForestConfig = field(default_factory=ForestConfig)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError("forest input", ("rows", self.n_features), X.shape)
        return X

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        total = np.zeros((X.shape[0], self.n_classes))
        for tree in self.trees:
            total += tree.predict_proba(X)
        return total / len(self.trees)

    def to_bytes(self) -> bytes:
        meta = {"config": self.config.to_dict(), "n_features": self.n_features, "n_classes": self.n_classes}
        w = BinaryWriter().header(FOREST_MAGIC, FOREST_VERSION, meta).u32(len(self.trees))
        for t in self.trees:
            w.array(t.feature, "i4").array(t.threshold, "f8").array(t.left, "i4").array(t.right, "i4")
            w.array(t.value, "f8")
        return w.getvalue()

    @classmethod
    def from_reader(cls, r: BinaryReader) -> "ForestModel":
        _, meta = r.header(FOREST_MAGIC, (FOREST_VERSION,))
        trees = []
        for _ in range(r.u32()):
            trees.append(Tree(r.array("i4"), r.array("f8"), r.array("i4"), r.array("i4"), r.array("f8")))
        return cls(trees, int(meta["n_features"]), int(meta["n_classes"]), ForestConfig.from_dict(meta["config"]))


def _check_training_set(X: np.ndarray, y: np.ndarray, num_classes: Optional[int]) -> Tuple[np.ndarray, np.ndarray, int]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.ndim != 2:
        raise ShapeError("training features", ("rows", "features"), X.shape)
    if X.shape[1] == 0:
        raise DatasetError("feature dimension is 0")
    if X.shape[0] != y.shape[0] or X.shape[0] < 2:
        raise DatasetError(f"need >= 2 rows with one label each, got {X.shape[0]} rows and {y.shape[0]} labels")
    if not np.all(np.isfinite(X)):
        raise DatasetError("training features contain non-finite values")
    if np.unique(y).size < 2:
        raise DatasetError(f"need at least 2 classes, got only {np.unique(y).tolist()}")
    n_classes = int(num_classes if num_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= n_classes:
        raise DatasetError(f"labels outside [0, {n_classes})")
    return X, y, n_classes


def fit_forest(X: np.ndarray, y: np.ndarray, cfg: Optional[ForestConfig] = None,
               num_classes: Optional[int] = None) -> ForestModel:
    """Tree ``i`` grows from stream ``(seed, "tree", i)``; worker count never changes the result."""
    cfg = cfg or ForestConfig()
    X, y, n_classes = _check_training_set(X, y, num_classes)

    def grow(i: int) -> Tree:
        return _grow_tree(X, y, n_classes, cfg, derive_rng(cfg.seed, "tree", i))

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            trees = list(pool.map(grow, range(cfg.n_trees)))
    else:
        trees = [grow(i) for i in range(cfg.n_trees)]
    log.debug("forest_fit", trees=len(trees), rows=X.shape[0], features=X.shape[1],
              nodes=sum(t.node_count for t in trees))
    return ForestModel(trees, X.shape[1], n_classes, cfg)


def forest_predict(model: ForestModel, x: np.ndarray) -> Tuple[Union[int, np.ndarray], np.ndarray]:
    """(label, probabilities) for one feature vector, or (labels, probability rows) for a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    probs = model.predict_proba(x[None] if single else x)
    labels = np.argmax(probs, axis=1)
    if single:
        return int(labels[0]), probs[0]
    return labels, probs


# --------- logistic regression ----------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LinearHead:
    weights: np.ndarray  # (C, d) on standardized features
    bias: np.ndarray  # (C,)
    mean: np.ndarray  # (d,)
    scale: np.ndarray  # (d,)
    config: LogRegConfig = field(default_factory=LogRegConfig)

    @property
    def n_features(self) -> int:
        return int(self.weights.shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.weights.shape[0])

    def margins(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError("linear head input", ("rows", self.n_features), X.shape)
        return ((X - self.mean) / self.scale) @ self.weights.T + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.margins(X))

    def to_bytes(self) -> bytes:
        meta = {"n_features": self.n_features, "n_classes": self.n_classes, "config": self.config.to_dict()}
        return (BinaryWriter().header(LINEAR_MAGIC, LINEAR_VERSION, meta)
                .array(self.weights, "f8").array(self.bias, "f8").array(self.mean, "f8").array(self.scale, "f8")
                .getvalue())

    @classmethod
    def from_reader(cls, r: BinaryReader) -> "LinearHead":
        _, meta = r.header(LINEAR_MAGIC, (LINEAR_VERSION,))
        head = cls(r.array("f8"), r.array("f8"), r.array("f8"), r.array("f8"), LogRegConfig.from_dict(meta["config"]))
        if head.weights.shape != (meta["n_classes"], meta["n_features"]):
            raise FormatError(f"weights {head.weights.shape} disagree with metadata "
                              f"({meta['n_classes']}, {meta['n_features']})")
        return head


def fit_logreg(X: np.ndarray, y: np.ndarray, l2: float = 1e-3, epochs: int = 500, lr: float = 1.0,
               seed: int = 0, tol: float = 1e-7, num_classes: Optional[int] = None) -> LinearHead:
    """
    One-vs-rest logistic heads by full-batch gradient descent on standardized
    features, with decoupled L2 shrinkage. The step is capped at 1/L for the
    logistic loss's Lipschitz constant L. Stops when the loss change drops
    below ``tol``.
    """
    cfg = LogRegConfig(l2=l2, epochs=epochs, lr=lr, tol=tol, seed=seed)
    X, y, n_classes = _check_training_set(X, y, num_classes)
    n, d = X.shape
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = (X - mean) / scale
    targets = (y[:, None] == np.arange(n_classes)[None]).astype(np.float64)

    lipschitz = (np.linalg.norm(Xs, 2) ** 2 / n + 1.0) / 4.0
    step = min(lr, 1.0 / lipschitz)
    rng = derive_rng(seed, "logreg")
    W = rng.normal(0.0, 0.01, size=(n_classes, d))
    b = np.zeros(n_classes)
    previous = np.inf
    for epoch in range(epochs):
        p = _sigmoid(Xs @ W.T + b)
        eps = 1e-12
        loss = -np.mean(targets * np.log(p + eps) + (1 - targets) * np.log(1 - p + eps))
        err = (p - targets) / n
        W = (W - step * (err.T @ Xs)) / (1.0 + step * l2)
        b = b - step * err.sum(axis=0)
        if abs(previous - loss) < tol:
            break
        previous = loss
    log.debug("logreg_fit", epochs=epoch + 1, loss=float(loss), step=step)
    return LinearHead(W, b, mean, scale, cfg)


def linear_predict(head: LinearHead, x: np.ndarray) -> Tuple[Union[int, np.ndarray], np.ndarray]:
    """(label, per-class sigmoid scores); argmax keeps the lowest class index on ties."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    scores = head.predict_proba(x[None] if single else x)
    labels = np.argmax(scores, axis=1)
    if single:
        return int(labels[0]), scores[0]
    return labels, scores


def save_head(head: Union[ForestModel, LinearHead], path: Union[str, Path]) -> None:
    Path(path).write_bytes(head.to_bytes())


def load_head(path: Union[str, Path]) -> Union[ForestModel, LinearHead]:
    return read_head(BinaryReader.open(path), expect_end=True)


def read_head(r: BinaryReader, expect_end: bool = False) -> Union[ForestModel, LinearHead]:
    magic = r.peek(4)
    readers: Dict[bytes, type] = {FOREST_MAGIC: ForestModel, LINEAR_MAGIC: LinearHead}
    if magic not in readers:
        raise FormatError(f"bad magic {magic!r}, expected {FOREST_MAGIC!r} or {LINEAR_MAGIC!r}", offset=r.offset)
    head = readers[magic].from_reader(r)
    if expect_end:
        r.expect_end()
    return head
