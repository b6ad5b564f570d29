"""Gradient-boosted regression trees with a softmax objective (multiclass), exact greedy splits.

Each round fits one second-order regression tree per class to the softmax gradient
``p - y`` and hessian ``p (1 - p)``; leaf weight is ``-G / (H + lambda)``. Prediction sums
``learning_rate * leaf`` over all rounds on top of a uniform (all-zero) prior.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numba
import numpy as np

from .utils import read_container, write_container

SELECTOR_FORMAT_VERSION = 1
HESS_FLOOR = 1e-6


@dataclass
class GBTConfig:
    rounds: int = 60
    learning_rate: float = 0.2
    max_depth: int = 5
    min_samples_leaf: int = 5
    subsample: float = 0.8
    reg_lambda: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.rounds < 1 or self.learning_rate <= 0 or self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("invalid boosting configuration")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be non-negative")


@dataclass
class SelectorModel:
    """Trees stored as padded node arrays of shape (rounds, n_classes, max_nodes).

    ``feature == -1`` marks a leaf; internal nodes send ``x[feature] <= threshold`` left.
    """

    n_classes: int
    n_features: int
    learning_rate: float
    max_depth: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    config: dict

    @property
    def rounds(self) -> int:
        return self.feature.shape[0]

    def tree_depth(self, r: int, k: int) -> int:
        def depth(node):
            if self.feature[r, k, node] < 0:
                return 0
            return 1 + max(depth(self.left[r, k, node]), depth(self.right[r, k, node]))
        return depth(0)


def _best_split(xs, order, g, h, min_leaf, lam):
    """Best (gain, feature, threshold) over all features for one node.

    ``order`` (s, d) holds each feature's row indices sorted by value (stable, so ties keep
    index order and results are deterministic).
    """
    s, d = order.shape
    if s < 2 * min_leaf:
        return None
    vals = np.take_along_axis(xs, order, axis=0)
    gs = np.cumsum(g[order], axis=0)
    hs = np.cumsum(h[order], axis=0)
    G, H = gs[-1], hs[-1]
    gl, hl = gs[:-1], hs[:-1]
    gr, hr = G - gl, H - hl
    gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - G * G / (H + lam)
    left_count = np.arange(1, s)[:, None]
    valid = (vals[1:] > vals[:-1]) & (left_count >= min_leaf) & (s - left_count >= min_leaf)
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    # first maximum in (feature, position) order
    flat = np.argmax(gain.T)
    f, pos = divmod(int(flat), s - 1)
    thr = 0.5 * (vals[pos, f] + vals[pos + 1, f])
    if not (vals[pos, f] <= thr < vals[pos + 1, f]):
        thr = vals[pos, f]
    return float(gain[pos, f]), f, float(thr)


def fit_tree(x: np.ndarray, g: np.ndarray, h: np.ndarray, max_depth: int, min_leaf: int, lam: float):
    """Greedy exact regression tree on rows of ``x``. Returns node arrays (unpadded lists).

    A node splits whenever a valid threshold exists and depth allows; the best candidate is
    taken even when its gain is not positive, which lets symmetric problems (XOR) progress.
    """
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root_order = np.argsort(x, axis=0, kind="stable")
    stack = [(new_node(), np.arange(x.shape[0]), root_order, 0)]
    while stack:
        node, rows, order, depth = stack.pop()
        G, H = g[rows].sum(), h[rows].sum()
        value[node] = -G / (H + lam)
        if depth >= max_depth:
            continue
        found = _best_split(x, order, g, h, min_leaf, lam)
        if found is None:
            continue
        _, f, thr = found
        go_left = x[:, f] <= thr
        feature[node], threshold[node] = f, thr
        l, r = new_node(), new_node()
        left[node], right[node] = l, r
        lmask = go_left[order]
        n_left = int(go_left[rows].sum())
        d = order.shape[1]
        lorder = order.T[lmask.T].reshape(d, n_left).T
        rorder = order.T[~lmask.T].reshape(d, len(rows) - n_left).T
        stack.append((r, rows[~go_left[rows]], rorder, depth + 1))
        stack.append((l, rows[go_left[rows]], lorder, depth + 1))
    return feature, threshold, left, right, value


def _softmax(scores):
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def gbt_train(features: np.ndarray, labels: np.ndarray, n_classes: int, config: GBTConfig) -> SelectorModel:
    config.validate()
    x = np.ascontiguousarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("cannot train a selector on an empty training set")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("labels outside the class range")
    n, d = x.shape
    rng = np.random.default_rng(config.seed)
    onehot = np.eye(n_classes)[y]
    scores = np.zeros((n, n_classes))
    trees = []
    n_sub = max(1, int(round(config.subsample * n)))
    for _ in range(config.rounds):
        rows = np.sort(rng.choice(n, size=n_sub, replace=False)) if n_sub < n else np.arange(n)
        p = _softmax(scores)
        grad = p - onehot
        hess = np.maximum(p * (1.0 - p), HESS_FLOOR)
        xs = x[rows]
        round_trees = []
        for k in range(n_classes):
            tree = fit_tree(xs, grad[rows, k], hess[rows, k], config.max_depth, config.min_samples_leaf,
                            config.reg_lambda)
            round_trees.append(tree)
        for k, tree in enumerate(round_trees):
            scores[:, k] += config.learning_rate * _apply_tree(tree, x)
        trees.append(round_trees)
    return _pack(trees, n_classes, d, config)


def _apply_tree(tree, x):
    feature, threshold, left, right, value = (np.asarray(a) for a in tree)
    node = np.zeros(x.shape[0], dtype=np.int64)
    while True:
        f = feature[node]
        internal = f >= 0
        if not internal.any():
            return value[node]
        fi = np.where(internal, f, 0)
        go_left = x[np.arange(x.shape[0]), fi] <= threshold[node]
        node = np.where(internal, np.where(go_left, left[node], right[node]), node)


def _pack(trees, n_classes, d, config) -> SelectorModel:
    width = max(len(t[0]) for rt in trees for t in rt)
    shape = (len(trees), n_classes, width)
    feature = np.full(shape, -1, dtype=np.int64)
    threshold = np.zeros(shape)
    left = np.full(shape, -1, dtype=np.int64)
    right = np.full(shape, -1, dtype=np.int64)
    value = np.zeros(shape)
    for r, rt in enumerate(trees):
        for k, (f, t, lft, rgt, v) in enumerate(rt):
            m = len(f)
            feature[r, k, :m] = f
            threshold[r, k, :m] = t
            left[r, k, :m] = lft
            right[r, k, :m] = rgt
            value[r, k, :m] = v
    return SelectorModel(n_classes, d, config.learning_rate, config.max_depth,
                         feature, threshold, left, right, value, asdict(config))


@numba.njit(cache=True)
def _scores_kernel(x, feature, threshold, left, right, value, lr):
    n = x.shape[0]
    rounds, n_classes, _ = feature.shape
    out = np.zeros((n, n_classes))
    for i in range(n):
        for r in range(rounds):
            for k in range(n_classes):
                node = 0
                while feature[r, k, node] >= 0:
                    if x[i, feature[r, k, node]] <= threshold[r, k, node]:
                        node = left[r, k, node]
                    else:
                        node = right[r, k, node]
                out[i, k] += lr * value[r, k, node]
    return out


def gbt_scores(model: SelectorModel, x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    if x.shape[1] != model.n_features:
        raise ValueError(f"selector expects {model.n_features} features, got {x.shape[1]}")
    return _scores_kernel(x, model.feature, model.threshold, model.left, model.right, model.value,
                          model.learning_rate)


def gbt_predict(model: SelectorModel, x: np.ndarray):
    """Class id per row (or a single int for a 1-D input); ties go to the lowest id."""
    single = np.asarray(x).ndim == 1
    ids = np.argmax(gbt_scores(model, x), axis=1)
    return int(ids[0]) if single else ids


def save_selector(model: SelectorModel, path) -> None:
    meta = {"n_classes": model.n_classes, "n_features": model.n_features,
            "learning_rate": model.learning_rate, "max_depth": model.max_depth, "config": model.config}
    arrays = {"feature": model.feature, "threshold": model.threshold, "left": model.left,
              "right": model.right, "value": model.value}
    write_container(path, "gbt-selector", SELECTOR_FORMAT_VERSION, meta, arrays)


def load_selector(path) -> SelectorModel:
    meta, a = read_container(path, "gbt-selector", SELECTOR_FORMAT_VERSION)
    return SelectorModel(meta["n_classes"], meta["n_features"], meta["learning_rate"], meta["max_depth"],
                         a["feature"], a["threshold"], a["left"], a["right"], a["value"], meta["config"])
