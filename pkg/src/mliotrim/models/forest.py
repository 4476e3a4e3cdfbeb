"""Random forest of CART trees with Gini splits, built on numpy arrays.

Trees are stored flat (one array per node attribute) so that batch
prediction walks every row of a matrix through a tree at once, and so that
serialization is a matter of writing a handful of arrays.

A split sends ``x[feature] <= threshold`` left, with ``threshold`` set to the
largest left-hand training value rather than a midpoint.  The induced
partition therefore depends only on the ordering of feature values, and any
strictly increasing rescaling of a feature (applied to train and test data
alike) yields exactly the same predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import ContractViolation, Prediction
from ..features import LAYOUT_HASH, N_FEATURES


class TrainingError(ValueError):
    pass


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: Optional[int] = None
    feature_subsample: int = math.ceil(math.sqrt(N_FEATURES))
    seed: int = 0
    bootstrap: bool = True
    min_samples_leaf: int = 1


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # P(essential) at the node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_probabilities(self) -> np.ndarray:
        leaf = self.feature < 0
        p = self.value[leaf]
        return np.column_stack([1.0 - p, p])

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            r, n, f = rows[active], node[active], feat[active]
            go_left = X[r, f] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass
class ForestModel:
    trees: list[Tree]
    rng_seed: int
    feature_subsample: int
    max_depth: Optional[int] = None
    layout_hash: str = LAYOUT_HASH
    profiles: dict = field(default_factory=dict)

    kind = "forest"

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _best_split(Xn: np.ndarray, yn: np.ndarray, min_leaf: int):
    """Best Gini split over the columns of ``Xn``.

    Returns ``(column, threshold, impurity)`` or None.  Ties resolve to the
    earliest column, then the smallest threshold.
    """
    n = len(yn)
    # one row per feature; tie order inside equal values cannot change the
    # counts at value boundaries, so an unstable sort is fine
    Xt = np.ascontiguousarray(Xn.T)
    order = np.argsort(Xt, axis=1)
    xs = np.take_along_axis(Xt, order, axis=1)
    ys = yn[order]
    cl = np.cumsum(ys, axis=1)[:, :-1].astype(float)
    nl = np.arange(1, n, dtype=float)[None, :]
    nr = n - nl
    cr = ys.sum(axis=1)[:, None] - cl
    imp = 2.0 * cl * (nl - cl) / nl + 2.0 * cr * (nr - cr) / nr
    valid = xs[:, :-1] < xs[:, 1:]
    if min_leaf > 1:
        valid &= (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    imp = np.where(valid, imp, np.inf)
    flat = np.argmin(imp)
    col, pos = divmod(int(flat), n - 1)
    return col, float(xs[col, pos]), float(imp[col, pos])


def _grow_tree(X: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator) -> Tree:
    n_features = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        pos = int(yn.sum())
        if pos == 0 or pos == len(yn) or len(yn) < 2 * cfg.min_samples_leaf:
            continue
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            continue
        # draw features in random order until enough non-constant ones are found
        perm = rng.permutation(n_features)
        chosen, blocks = [], []
        for start in range(0, n_features, cfg.feature_subsample):
            cols = perm[start : start + cfg.feature_subsample]
            block = X[np.ix_(idx, cols)]
            varying = np.flatnonzero(block.min(axis=0) < block.max(axis=0))
            varying = varying[: cfg.feature_subsample - len(chosen)]
            chosen.extend(cols[varying].tolist())
            blocks.append(block[:, varying])
            if len(chosen) >= cfg.feature_subsample:
                break
        if not chosen:
            continue
        split = _best_split(np.hstack(blocks), yn, cfg.min_samples_leaf)
        if split is None:
            continue
        col, thr, _ = split
        f = chosen[col]
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node] = f
        threshold[node] = thr
        lnode = new_node(li)
        rnode = new_node(ri)
        left[node] = lnode
        right[node] = rnode
        stack.append((rnode, ri, depth + 1))
        stack.append((lnode, li, depth + 1))

    return Tree(
        np.asarray(feature, dtype=np.int32),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(value, dtype=float),
    )


def train_forest(X: np.ndarray, y: np.ndarray, config: Optional[ForestConfig] = None) -> ForestModel:
    """Fit ``n_trees`` trees, each on a bootstrap resample of size n.

    Tree ``i`` draws from its own generator spawned from ``config.seed``, so
    the forest is a deterministic function of (data, config).
    """
    cfg = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ContractViolation("X must be (n, d) with one label per row")
    if len(y) < 2 or len(np.unique(y)) < 2:
        raise TrainingError("degenerate training set: need at least two samples of both classes")
    n = len(y)
    trees = []
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees):
        rng = np.random.default_rng(child)
        if cfg.bootstrap:
            sample = rng.integers(0, n, n)
            trees.append(_grow_tree(X[sample], y[sample], cfg, rng))
        else:
            trees.append(_grow_tree(X, y, cfg, rng))
    return ForestModel(trees, cfg.seed, cfg.feature_subsample, cfg.max_depth)


def _check_layout(m, X: np.ndarray) -> np.ndarray:
    if m.layout_hash != LAYOUT_HASH:
        raise ContractViolation(
            f"model feature layout {m.layout_hash} does not match pipeline layout {LAYOUT_HASH}"
        )
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != N_FEATURES:
        raise ContractViolation(f"expected {N_FEATURES} features, got {X.shape[-1]}")
    return X


def forest_scores(m: ForestModel, X: np.ndarray) -> np.ndarray:
    """Mean leaf P(essential) across trees, one score per row."""
    X = _check_layout(m, X)
    X = np.atleast_2d(X)
    total = np.zeros(len(X))
    for tree in m.trees:
        total += tree.predict_proba(X)
    return total / len(m.trees)


def predict_forest(m: ForestModel, v: np.ndarray) -> Prediction:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ContractViolation("predict_forest takes a single vector")
    return Prediction.from_score(forest_scores(m, v)[0])
