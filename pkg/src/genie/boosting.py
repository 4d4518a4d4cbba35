"""Gradient-boosted regression trees for click probability.

Labels map to {0,1}; each boosting iteration fits one least-squares tree to
the negative log-loss gradient in score space (y - sigmoid(score)) and
scales leaf values by the learning rate. The final probability is the
sigmoid of the base score plus the sum of traversed leaf weights.
Continuous splits pick from per-feature quantile thresholds; categorical
splits choose a category subset by ordering categories on mean target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, SchemaError
from .click_model import LabeledImpression


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass
class TreeNode:
    # leaf: weight set, feature None. split: feature plus threshold (continuous)
    # or left-branch category set (categorical).
    feature: str | None = None
    threshold: float | None = None
    categories: frozenset[str] | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    weight: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass
class GbtParams:
    n_trees: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 20
    n_thresholds: int = 32

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigurationError("n_trees must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigurationError("learning_rate must be in (0, 1]")
        if self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ConfigurationError("max_depth and min_samples_leaf must be >= 1")


@dataclass
class GbtModel:
    trees: list[TreeNode]
    base_score: float
    learning_rate: float
    max_depth: int
    min_samples_leaf: int
    feature_names: tuple[str, ...]
    feature_kinds: dict[str, str]
    train_losses: list[float] = field(default_factory=list)

    def leaf_weight(self, tree: TreeNode, features: dict) -> float:
        node = tree
        while not node.is_leaf:
            if node.feature not in features:
                raise SchemaError(f"impression missing feature {node.feature!r}")
            value = features[node.feature]
            if node.categories is not None:
                go_left = str(value) in node.categories
            else:
                go_left = float(value) <= node.threshold
            node = node.left if go_left else node.right
        return node.weight

    def decision_score(self, features: dict) -> float:
        return self.base_score + sum(self.leaf_weight(tree, features) for tree in self.trees)

    def predict_impression(self, features: dict) -> float:
        return sigmoid(self.decision_score(features))


def gbt_predict(model: GbtModel, impression: dict) -> float:
    return model.predict_impression(impression)


# ---------------------------------------------------------------------------
# training

class _Column:
    """Per-feature training view: binned continuous values or category codes."""

    def __init__(self, name: str, values: list):
        self.name = name
        if isinstance(values[0], str):
            self.kind = "categorical"
            self.vocab = sorted(set(values))
            code_of = {c: i for i, c in enumerate(self.vocab)}
            self.codes = np.fromiter((code_of[v] for v in values), dtype=np.int64, count=len(values))
        else:
            self.kind = "continuous"
            self.values = np.asarray(values, dtype=float)


def _quantile_thresholds(values: np.ndarray, n_thresholds: int) -> np.ndarray:
    qs = np.quantile(values, np.linspace(0.0, 1.0, n_thresholds + 1)[1:-1])
    return np.unique(qs)


def _best_continuous_split(bins, g, idx, n_bins, min_leaf):
    cnt = np.bincount(bins[idx], minlength=n_bins)
    sm = np.bincount(bins[idx], weights=g[idx], minlength=n_bins)
    n_l = np.cumsum(cnt)[:-1]
    s_l = np.cumsum(sm)[:-1]
    n = len(idx)
    s = g[idx].sum()
    n_r = n - n_l
    s_r = s - s_l
    valid = (n_l >= min_leaf) & (n_r >= min_leaf)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(valid, s_l**2 / n_l + s_r**2 / n_r, -np.inf) - s**2 / n
    k = int(np.argmax(gain))
    if not np.isfinite(gain[k]) or gain[k] <= 1e-12:
        return None
    return float(gain[k]), k


def _best_categorical_split(codes, g, idx, n_vocab, min_leaf):
    cnt = np.bincount(codes[idx], minlength=n_vocab)
    sm = np.bincount(codes[idx], weights=g[idx], minlength=n_vocab)
    present = np.flatnonzero(cnt > 0)
    if len(present) < 2:
        return None
    means = sm[present] / cnt[present]
    order = present[np.lexsort((present, means))]  # by mean target, ties by code
    n = len(idx)
    s = g[idx].sum()
    n_l = np.cumsum(cnt[order])[:-1]
    s_l = np.cumsum(sm[order])[:-1]
    n_r = n - n_l
    s_r = s - s_l
    valid = (n_l >= min_leaf) & (n_r >= min_leaf)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(valid, s_l**2 / n_l + s_r**2 / n_r, -np.inf) - s**2 / n
    k = int(np.argmax(gain))
    if not np.isfinite(gain[k]) or gain[k] <= 1e-12:
        return None
    return float(gain[k]), order[: k + 1]


def gbt_train(data: Sequence[LabeledImpression], params: GbtParams | None = None) -> GbtModel:
    """Fit the boosted ensemble; see module docstring for the procedure."""
    if not data:
        raise ConfigurationError("training data must be non-empty")
    params = params or GbtParams()
    names = tuple(sorted(data[0].features))
    columns = {name: _Column(name, [imp.features[name] for imp in data]) for name in names}
    y = np.fromiter(((imp.label + 1) // 2 for imp in data), dtype=float, count=len(data))

    binned: dict[str, tuple[np.ndarray, int, np.ndarray | None]] = {}
    for name, col in columns.items():
        if col.kind == "continuous":
            thresholds = _quantile_thresholds(col.values, params.n_thresholds)
            bins = np.searchsorted(thresholds, col.values, side="left")
            binned[name] = (bins, len(thresholds) + 1, thresholds)
        else:
            binned[name] = (col.codes, len(col.vocab), None)

    base_rate = min(max(float(y.mean()), 1e-6), 1.0 - 1e-6)
    base_score = math.log(base_rate / (1.0 - base_rate))
    scores = np.full(len(y), base_score)

    model = GbtModel(
        trees=[],
        base_score=base_score,
        learning_rate=params.learning_rate,
        max_depth=params.max_depth,
        min_samples_leaf=params.min_samples_leaf,
        feature_names=names,
        feature_kinds={name: columns[name].kind for name in names},
    )

    def build(idx: np.ndarray, depth: int) -> TreeNode:
        g_node = g[idx]
        if depth >= params.max_depth or len(idx) < 2 * params.min_samples_leaf or np.ptp(g_node) == 0:
            return _leaf(idx)
        best = None
        for name in names:
            bins, width, thresholds = binned[name]
            if columns[name].kind == "continuous":
                found = _best_continuous_split(bins, g, idx, width, params.min_samples_leaf)
                if found is None:
                    continue
                gain, k = found
                candidate = (gain, name, float(thresholds[k]), None)
            else:
                found = _best_categorical_split(bins, g, idx, width, params.min_samples_leaf)
                if found is None:
                    continue
                gain, left_codes = found
                candidate = (gain, name, None, left_codes)
            if best is None or candidate[0] > best[0]:
                best = candidate
        if best is None:
            return _leaf(idx)
        _, name, threshold, left_codes = best
        bins, _, _ = binned[name]
        if left_codes is None:
            go_left = columns[name].values[idx] <= threshold
            left_set = None
        else:
            go_left = np.isin(bins[idx], left_codes)
            left_set = frozenset(columns[name].vocab[c] for c in left_codes)
        return TreeNode(
            feature=name,
            threshold=threshold,
            categories=left_set,
            left=build(idx[go_left], depth + 1),
            right=build(idx[~go_left], depth + 1),
        )

    def _leaf(idx: np.ndarray) -> TreeNode:
        weight = params.learning_rate * float(g[idx].mean())
        scores[idx] += weight
        return TreeNode(weight=weight)

    for _ in range(params.n_trees):
        p = 1.0 / (1.0 + np.exp(-scores))
        g = y - p
        model.trees.append(build(np.arange(len(y)), depth=0))
        p_new = np.clip(1.0 / (1.0 + np.exp(-scores)), 1e-12, 1 - 1e-12)
        loss = float(np.mean(-y * np.log(p_new) - (1 - y) * np.log(1 - p_new)))
        model.train_losses.append(loss)
    return model


def validate_tree(node: TreeNode, kinds: dict[str, str], vocab: dict[str, set[str]] | None = None) -> None:
    """Raise if any root-to-leaf path constrains a feature inconsistently."""

    def walk(n: TreeNode, lo: dict, hi: dict, allowed: dict) -> None:
        if n.is_leaf:
            return
        if n.categories is not None:
            cur = allowed.get(n.feature)
            left_cats = set(n.categories) if cur is None else set(n.categories) & cur
            if not left_cats:
                raise SchemaError(f"empty categorical region for {n.feature!r}")
            walk(n.left, lo, hi, {**allowed, n.feature: left_cats})
            if cur is not None:
                right_cats = cur - set(n.categories)
                if not right_cats:
                    raise SchemaError(f"empty categorical region for {n.feature!r}")
                walk(n.right, lo, hi, {**allowed, n.feature: right_cats})
            else:
                walk(n.right, lo, hi, allowed)
            return
        low = lo.get(n.feature, -math.inf)
        high = hi.get(n.feature, math.inf)
        if n.threshold <= low or n.threshold >= high:
            raise SchemaError(f"inconsistent threshold {n.threshold} for {n.feature!r}")
        walk(n.left, lo, {**hi, n.feature: n.threshold}, allowed)
        walk(n.right, {**lo, n.feature: n.threshold}, hi, allowed)

    walk(node, {}, {}, {} if vocab is None else {k: set(v) for k, v in vocab.items()})


# ---------------------------------------------------------------------------
# serialization

def _node_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"weight": node.weight}
    d = {"feature": node.feature, "left": _node_to_dict(node.left), "right": _node_to_dict(node.right)}
    if node.categories is not None:
        d["categories"] = sorted(node.categories)
    else:
        d["threshold"] = node.threshold
    return d


def _node_from_dict(data: dict) -> TreeNode:
    if "feature" not in data:
        return TreeNode(weight=float(data["weight"]))
    return TreeNode(
        feature=data["feature"],
        threshold=float(data["threshold"]) if "threshold" in data else None,
        categories=frozenset(data["categories"]) if "categories" in data else None,
        left=_node_from_dict(data["left"]),
        right=_node_from_dict(data["right"]),
    )


def gbt_to_dict(model: GbtModel) -> dict:
    return {
        "kind": "gbt",
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "max_depth": model.max_depth,
        "min_samples_leaf": model.min_samples_leaf,
        "feature_names": list(model.feature_names),
        "feature_kinds": dict(sorted(model.feature_kinds.items())),
        "trees": [_node_to_dict(t) for t in model.trees],
        "train_losses": list(model.train_losses),
    }


def gbt_from_dict(data: dict) -> GbtModel:
    return GbtModel(
        trees=[_node_from_dict(t) for t in data["trees"]],
        base_score=float(data["base_score"]),
        learning_rate=float(data["learning_rate"]),
        max_depth=int(data["max_depth"]),
        min_samples_leaf=int(data["min_samples_leaf"]),
        feature_names=tuple(data["feature_names"]),
        feature_kinds=dict(data["feature_kinds"]),
        train_losses=[float(x) for x in data["train_losses"]],
    )
