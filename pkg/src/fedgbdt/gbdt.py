"""XGBoost-style boosted regression trees with exact greedy split search.

Each boosting step fits a tree to the first and second derivatives of the
loss at the current margins, scores candidate splits with the regularized
gain and sets leaf weights to ``-G / (H + lambda)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Union

import numpy as np

from .data import Dataset, SparseExample, TaskKind

# relative gain difference below which two candidate splits count as tied;
# also the floor, relative to the node score, that a split gain must clear
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class GbdtConfig:
    num_trees: int = 100
    max_depth: int = 8
    eta: float = 0.1
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    # None resolves per task: 0.5 for regression, margin 0.0 for classification
    base_score: float | None = None

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must be in (0, 1]")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("lambda, gamma and min_child_weight must be non-negative")

    def resolved(self, task: TaskKind) -> "GbdtConfig":
        if self.base_score is not None:
            return self
        return replace(self, base_score=0.5 if task is TaskKind.REGRESSION else 0.0)


@dataclass(frozen=True)
class GradHessPair:
    g: float
    h: float


@dataclass(frozen=True)
class SplitStats:
    g_sum: float
    h_sum: float
    count: int

    def __add__(self, other: "SplitStats") -> "SplitStats":
        return SplitStats(self.g_sum + other.g_sum, self.h_sum + other.h_sum,
                          self.count + other.count)


@dataclass(frozen=True)
class Leaf:
    weight: float


@dataclass(frozen=True)
class Split:
    feature: int  # 1-based, as in LIBSVM
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Split]


@dataclass(frozen=True)
class Tree:
    root: TreeNode

    @cached_property
    def leaf_count(self) -> int:
        return sum(1 for node in _walk(self.root) if isinstance(node, Leaf))

    @cached_property
    def max_feature(self) -> int:
        return max((n.feature for n in _walk(self.root) if isinstance(n, Split)), default=0)

    @cached_property
    def depth(self) -> int:
        def d(node):
            if isinstance(node, Leaf):
                return 0
            return 1 + max(d(node.left), d(node.right))
        return d(self.root)

    @cached_property
    def _arrays(self):
        feature, threshold, left, right, weight = [], [], [], [], []

        def emit(node) -> int:
            pos = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            weight.append(0.0)
            if isinstance(node, Leaf):
                weight[pos] = node.weight
            else:
                feature[pos] = node.feature - 1
                threshold[pos] = node.threshold
                left[pos] = emit(node.left)
                right[pos] = emit(node.right)
            return pos

        emit(self.root)
        return (np.array(feature), np.array(threshold), np.array(left),
                np.array(right), np.array(weight))

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Vectorized routing of the rows of a dense matrix."""
        feature, threshold, left, right, weight = self._arrays
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.intp)
        rows = np.arange(len(X))
        for _ in range(self.depth):
            feat = feature[node]
            active = feat >= 0
            if not active.any():
                break
            r, n = rows[active], node[active]
            go_left = X[r, feat[active]] < threshold[n]
            node[active] = np.where(go_left, left[n], right[n])
        return weight[node]


def _walk(node: TreeNode):
    yield node
    if isinstance(node, Split):
        yield from _walk(node.left)
        yield from _walk(node.right)


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple[Tree, ...]
    config: GbdtConfig
    task: TaskKind

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        if len(self.trees) != self.config.num_trees:
            raise ValueError(
                f"ensemble has {len(self.trees)} trees but config says {self.config.num_trees}"
            )
        if self.config.base_score is None:
            object.__setattr__(self, "config", self.config.resolved(self.task))

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    @property
    def max_feature(self) -> int:
        return max((t.max_feature for t in self.trees), default=0)

    def tree_outputs(self, X: np.ndarray) -> np.ndarray:
        """Raw per-tree outputs, shape ``(N, M)``."""
        X = self._fit_width(X)
        out = np.empty((len(X), len(self.trees)))
        for t, tree in enumerate(self.trees):
            out[:, t] = tree.predict(X)
        return out

    def _fit_width(self, X: np.ndarray) -> np.ndarray:
        # features never seen by this ensemble's data are implicit zeros
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] < self.max_feature:
            X = np.pad(X, ((0, 0), (0, self.max_feature - X.shape[1])))
        return X

    def predict_margins(self, X: np.ndarray) -> np.ndarray:
        X = self._fit_width(X)
        margins = np.full(len(X), self.config.base_score, dtype=np.float64)
        for tree in self.trees:
            margins += self.config.eta * tree.predict(X)
        return margins


# ---------------------------------------------------------------- losses


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def grad_hess(task: TaskKind, y: float, y_hat: float) -> GradHessPair:
    g, h = grad_hess_arrays(task, np.array([y]), np.array([y_hat]))
    return GradHessPair(float(g[0]), float(h[0]))


def grad_hess_arrays(task: TaskKind, y: np.ndarray, margin: np.ndarray):
    if TaskKind.parse(task) is TaskKind.REGRESSION:
        return margin - y, np.ones_like(margin)
    p = sigmoid(margin)
    return p - y, p * (1.0 - p)


def loss(task: TaskKind, y: np.ndarray, margin: np.ndarray) -> float:
    """Mean training loss: half squared error, or logistic loss on the margin."""
    y = np.asarray(y, dtype=np.float64)
    margin = np.asarray(margin, dtype=np.float64)
    if TaskKind.parse(task) is TaskKind.REGRESSION:
        return float(np.mean(0.5 * (margin - y) ** 2))
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


# ---------------------------------------------------------------- scoring


def leaf_weight(stats: SplitStats, reg_lambda: float) -> float:
    denom = stats.h_sum + reg_lambda
    if denom <= 0:
        raise ValueError("degenerate node: H + lambda must be positive")
    return -stats.g_sum / denom


def split_gain(left: SplitStats, right: SplitStats, reg_lambda: float, gamma: float) -> float:
    hl = left.h_sum + reg_lambda
    hr = right.h_sum + reg_lambda
    hp = left.h_sum + right.h_sum + reg_lambda
    if hl <= 0 or hr <= 0 or hp <= 0:
        raise ValueError("degenerate split: every H + lambda must be positive")
    gp = left.g_sum + right.g_sum
    return 0.5 * (left.g_sum**2 / hl + right.g_sum**2 / hr - gp**2 / hp) - gamma


@dataclass(frozen=True)
class SplitCandidate:
    feature: int  # 1-based
    threshold: float
    gain: float
    left_rows: np.ndarray = field(repr=False, compare=False)
    right_rows: np.ndarray = field(repr=False, compare=False)


def _best_on_sorted(X, g, h, sorted_rows, reg_lambda, gamma, min_child_weight):
    """Scan a node given per-feature sorted row orders, shape ``(D, n)``.

    Returns ``(feature0, position, gain, threshold)`` or None.
    """
    D, n = sorted_rows.shape
    if n < 2:
        return None
    vals = X[sorted_rows, np.arange(D)[:, None]]
    cg = np.cumsum(g[sorted_rows], axis=1)[:, :-1]
    ch = np.cumsum(h[sorted_rows], axis=1)[:, :-1]
    G = float(g[sorted_rows[0]].sum())
    H = float(h[sorted_rows[0]].sum())
    gr, hr = G - cg, H - ch
    valid = (vals[:, :-1] < vals[:, 1:]) & (ch >= min_child_weight) & (hr >= min_child_weight)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (cg**2 / (ch + reg_lambda) + gr**2 / (hr + reg_lambda)
                      - G**2 / (H + reg_lambda)) - gamma
    gain = np.where(valid & np.isfinite(gain), gain, -np.inf)
    best = float(gain.max())
    # a gain indistinguishable from rounding noise of the node's own score is no gain
    if not best > TIE_TOLERANCE * max(1.0, G * G / (H + reg_lambda)):
        return None
    # gains equal up to rounding are ties; row-major first hit is the
    # lowest feature, then the lowest threshold
    tied = gain >= best - TIE_TOLERANCE * max(1.0, abs(best))
    j, pos = divmod(int(np.argmax(tied)), n - 1)
    best = float(gain[j, pos])
    threshold = 0.5 * (vals[j, pos] + vals[j, pos + 1])
    return j, pos, best, float(threshold)


def find_best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, rows: np.ndarray,
                    reg_lambda: float, gamma: float,
                    min_child_weight: float) -> SplitCandidate | None:
    """Exact greedy search over every feature and every distinct-value boundary.

    Ties (gains within ``TIE_TOLERANCE`` relative) go to the lowest feature
    index, then the lowest threshold.  Returns
    None when no boundary has positive gain with both children satisfying
    ``min_child_weight``.
    """
    X = np.asarray(X, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.intp)
    if X.shape[1] == 0:
        return None
    order = np.argsort(X[rows], axis=0, kind="stable").T
    sorted_rows = rows[order]
    found = _best_on_sorted(X, g, h, sorted_rows, reg_lambda, gamma, min_child_weight)
    if found is None:
        return None
    j, pos, gain, threshold = found
    go_left = X[rows, j] < threshold
    return SplitCandidate(j + 1, threshold, gain, rows[go_left], rows[~go_left])


SplitHook = Callable[[int, np.ndarray, "SplitCandidate | None"], None]


def grow_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, config: GbdtConfig,
              on_node: SplitHook | None = None) -> Tree:
    """Grow one tree depth-first up to ``config.max_depth``.

    ``on_node(depth, rows, candidate)`` is called for every node visited,
    with ``candidate`` None at leaves.
    """
    n, D = X.shape
    lam, gamma, mcw = config.reg_lambda, config.gamma, config.min_child_weight
    presorted = np.argsort(X, axis=0, kind="stable").T  # (D, n)

    def build(sorted_rows: np.ndarray, depth: int) -> TreeNode:
        rows = sorted_rows[0] if D else np.arange(n)
        found = None
        if depth < config.max_depth and D and sorted_rows.shape[1] >= 2:
            found = _best_on_sorted(X, g, h, sorted_rows, lam, gamma, mcw)
        if found is None:
            if on_node is not None:
                on_node(depth, np.sort(rows), None)
            stats = SplitStats(float(g[rows].sum()), float(h[rows].sum()), len(rows))
            return Leaf(leaf_weight(stats, lam))
        j, _, gain, threshold = found
        go_left = np.zeros(n, dtype=bool)
        go_left[rows] = X[rows, j] < threshold
        if on_node is not None:
            node_rows = np.sort(rows)
            mask = go_left[node_rows]
            on_node(depth, node_rows,
                    SplitCandidate(j + 1, threshold, gain, node_rows[mask], node_rows[~mask]))
        sel = go_left[sorted_rows]
        left_sorted = sorted_rows[sel].reshape(D, -1)
        right_sorted = sorted_rows[~sel].reshape(D, -1)
        return Split(j + 1, threshold, build(left_sorted, depth + 1),
                     build(right_sorted, depth + 1))

    return Tree(build(presorted, 0))


def train_ensemble(train: Dataset, config: GbdtConfig,
                   on_node: SplitHook | None = None) -> TreeEnsemble:
    if len(train) == 0:
        raise ValueError("training set is empty")
    config = config.resolved(train.task)
    X, y = train.X, train.y
    margins = np.full(len(train), config.base_score, dtype=np.float64)
    trees = []
    for _ in range(config.num_trees):
        g, h = grad_hess_arrays(train.task, y, margins)
        tree = grow_tree(X, g, h, config, on_node)
        margins += config.eta * tree.predict(X)
        trees.append(tree)
    return TreeEnsemble(tuple(trees), config, train.task)


# ---------------------------------------------------------------- prediction


def predict_tree(tree: Tree, x: SparseExample) -> float:
    node = tree.root
    while isinstance(node, Split):
        node = node.left if x.value(node.feature) < node.threshold else node.right
    return node.weight


def predict_margin(ensemble: TreeEnsemble, x: SparseExample) -> float:
    cfg = ensemble.config
    return cfg.base_score + sum(cfg.eta * predict_tree(t, x) for t in ensemble.trees)
