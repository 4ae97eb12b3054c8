"""Random-forest regressor built from CART trees with variance-reduction splits.

Trees are stored as flat arrays (feature, threshold, left, right, value) where
``feature == -1`` marks a leaf. Rows go left when ``x[feature] <= threshold``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from nephro.errors import ValidationError

MIN_TRAIN_ROWS = 10
_MIN_GAIN = 1e-12


@dataclasses.dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    max_depth: Optional[int] = 12
    min_leaf: int = 2
    features_per_split: Optional[int] = None  # default ceil(sqrt(n_features))
    bootstrap: bool = True
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.n_trees < 1:
            out.append("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            out.append("max_depth must be >= 1 or null")
        if self.min_leaf < 1:
            out.append("min_leaf must be >= 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            out.append("features_per_split must be >= 1 or null")
        return out

    def mtry(self, n_features: int) -> int:
        k = self.features_per_split or math.ceil(math.sqrt(n_features))
        return min(k, n_features)


@dataclasses.dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return self.value[node]
            go_left = X[rows[active], f[active]] <= self.threshold[node[active]]
            node[active] = np.where(go_left, self.left[node[active]], self.right[node[active]])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tree":
        return cls(
            np.asarray(data["feature"], dtype=np.int64),
            np.asarray(data["threshold"], dtype=float),
            np.asarray(data["left"], dtype=np.int64),
            np.asarray(data["right"], dtype=np.int64),
            np.asarray(data["value"], dtype=float),
        )


def _best_split(x_node: np.ndarray, y_node: np.ndarray, feats: np.ndarray, min_leaf: int):
    """Return (feature, threshold) minimising the children's summed SSE, or None."""
    n = len(y_node)
    i = np.arange(min_leaf - 1, n - min_leaf)
    if len(i) == 0:
        return None
    yc = y_node - y_node.mean()
    parent_sse = float(np.dot(yc, yc))
    xf = x_node[:, feats]
    order = np.argsort(xf, axis=0, kind="stable")
    xs = np.take_along_axis(xf, order, axis=0)
    ys = yc[order]
    csum = np.cumsum(ys, axis=0)
    csq = np.cumsum(ys * ys, axis=0)
    n_left = (i + 1).astype(float)[:, None]
    n_right = n - n_left
    sse = (csq[i] - csum[i] ** 2 / n_left) + ((csq[-1] - csq[i]) - (csum[-1] - csum[i]) ** 2 / n_right)
    sse = np.where(xs[i] < xs[i + 1], sse, np.inf)
    # first minimum in feature-sampling order, then position
    flat = int(np.argmin(sse.T))
    col, row = divmod(flat, len(i))
    if not sse[row, col] < parent_sse - _MIN_GAIN * max(1.0, parent_sse):
        return None
    lo, hi = xs[i[row], col], xs[i[row] + 1, col]
    thr = lo + (hi - lo) / 2.0
    if not thr < hi:  # guard against midpoint rounding up to hi
        thr = lo
    return int(feats[col]), float(thr)


def fit_tree(X: np.ndarray, y: np.ndarray, config: ForestConfig, rng: np.random.Generator) -> Tree:
    n_features = X.shape[1]
    mtry = config.mtry(n_features)
    feature, threshold, left, right, value = [], [], [], [], []
    stack = [(np.arange(len(y)), 0, -1, False)]
    while stack:
        idx, depth, parent, is_right = stack.pop()
        node = len(feature)
        if parent >= 0:
            (right if is_right else left)[parent] = node
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        depth_ok = config.max_depth is None or depth < config.max_depth
        if not depth_ok or len(idx) < 2 * config.min_leaf or np.ptp(y[idx]) == 0.0:
            continue
        feats = rng.choice(n_features, size=mtry, replace=False)
        split = _best_split(X[idx], y[idx], feats, config.min_leaf)
        if split is None:
            continue
        f, thr = split
        feature[node] = f
        threshold[node] = thr
        mask = X[idx, f] <= thr
        # push right first so the left subtree gets the lower node ids
        stack.append((idx[~mask], depth + 1, node, True))
        stack.append((idx[mask], depth + 1, node, False))
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=float),
    )


@dataclasses.dataclass
class ForestModel:
    config: ForestConfig
    n_features: int
    trees: list[Tree]
    feature_names: tuple[str, ...] = ()

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValidationError([f"expected {self.n_features} features, got {X.shape[1]}"])
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def to_json(self) -> str:
        return json.dumps({
            "config": dataclasses.asdict(self.config),
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        data = json.loads(text)
        return cls(
            ForestConfig(**data["config"]),
            int(data["n_features"]),
            [Tree.from_dict(t) for t in data["trees"]],
            tuple(data.get("feature_names", ())),
        )

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path: Path) -> "ForestModel":
        return cls.from_json(Path(path).read_text())


def rf_fit(X, y, config: ForestConfig = ForestConfig(), feature_names: Sequence[str] = ()) -> ForestModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    problems = config.problems()
    if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
        problems.append(f"X must be (n, d) and y (n,), got {X.shape} and {y.shape}")
    elif len(y) < MIN_TRAIN_ROWS:
        problems.append(f"random forest needs at least {MIN_TRAIN_ROWS} training rows, got {len(y)}")
    elif not (np.isfinite(X).all() and np.isfinite(y).all()):
        problems.append("training data contains non-finite values")
    if problems:
        raise ValidationError(problems)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_trees)
    trees = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        if config.bootstrap:
            sample = rng.integers(0, len(y), size=len(y))
            trees.append(fit_tree(X[sample], y[sample], config, rng))
        else:
            trees.append(fit_tree(X, y, config, rng))
    return ForestModel(config, X.shape[1], trees, tuple(feature_names))


def rf_predict(model: ForestModel, row) -> float:
    return float(model.predict(np.asarray(row, dtype=float).reshape(1, -1))[0])
