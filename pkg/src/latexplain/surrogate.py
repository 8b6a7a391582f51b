"""CART surrogate over latent points, plus decision and counterfactual rules."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

GAIN_TOL = 1e-12
LEAF = -1


@dataclass
class TreeConfig:
    max_depth: int = 8
    min_leaf: int = 2
    seed: int = 0  # CART here is deterministic; kept for config symmetry

    def __post_init__(self):
        if self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_leaf >= 1")


@dataclass
class DecisionTree:
    """Node arena. Internal nodes have ``feature >= 0``; leaves have ``feature == -1``.

    A value ``<= threshold`` goes to ``left``.
    """

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    label: list[int] = field(default_factory=list)
    counts: list[list[int]] = field(default_factory=list)
    num_classes: int = 0
    degenerate: bool = False

    def add_leaf(self, counts) -> int:
        counts = [int(c) for c in counts]
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.label.append(int(np.argmax(counts)))  # first max: lowest class wins ties
        self.counts.append(counts)
        return len(self.feature) - 1

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] == LEAF

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def leaves(self) -> list[int]:
        return [i for i in range(self.n_nodes) if self.is_leaf(i)]

    @property
    def depth(self) -> int:
        return max((len(p) for _, p in iter_paths(self)), default=0)

    def to_json(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.is_leaf(i):
                nodes.append({"label": self.label[i], "counts": self.counts[i]})
            else:
                nodes.append({"feature": self.feature[i], "threshold": self.threshold[i],
                              "left": self.left[i], "right": self.right[i]})
        return {"num_classes": self.num_classes, "degenerate": self.degenerate, "nodes": nodes}

    @classmethod
    def from_json(cls, doc: dict) -> "DecisionTree":
        tree = cls(num_classes=doc["num_classes"], degenerate=doc.get("degenerate", False))
        for node in doc["nodes"]:
            if "label" in node:
                tree.add_leaf(node["counts"])
                tree.label[-1] = node["label"]
            else:
                tree.feature.append(node["feature"])
                tree.threshold.append(float(node["threshold"]))
                tree.left.append(node["left"])
                tree.right.append(node["right"])
                tree.label.append(LEAF)
                tree.counts.append([])
        return tree

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def gini(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / total[..., None]
        g = 1.0 - np.sum(p * p, axis=-1)
    return np.where(total > 0, g, 0.0)


def _best_split(X, y, num_classes, min_leaf):
    """Best (gain, feature, threshold) by Gini decrease, or None.

    Ties go to the lower feature index, then the lower threshold.
    """
    n = len(y)
    parent = gini(np.bincount(y, minlength=num_classes))
    best = None
    onehot = np.eye(num_classes, dtype=np.int64)[y]
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left_counts = np.cumsum(onehot[order], axis=0)[:-1]  # row i: first i+1 samples
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        idx = np.flatnonzero(valid)
        lc = left_counts[idx]
        rc = left_counts[-1] + onehot[order[-1]] - lc
        nl = n_left[idx].astype(np.float64)
        gain = parent - (nl * gini(lc) + (n - nl) * gini(rc)) / n
        # thresholds ascend with idx: the first near-maximal gain has the lowest threshold
        j = int(np.flatnonzero(gain >= gain.max() - GAIN_TOL)[0])
        if gain[j] <= GAIN_TOL:
            continue
        lo, hi = xs[idx[j]], xs[idx[j] + 1]
        thr = (lo + hi) / 2.0
        if not lo <= thr < hi:
            thr = lo
        if best is None or gain[j] > best[0] + GAIN_TOL:
            best = (float(gain[j]), f, float(thr))
    return best


def fit_tree(latents, labels, cfg: TreeConfig | None = None, num_classes: int | None = None) -> DecisionTree:
    """Grow a CART classifier with Gini impurity (no pruning)."""
    cfg = cfg or TreeConfig()
    X = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) < 1:
        raise ValueError("need matching, non-empty latents and labels")
    num_classes = int(num_classes if num_classes is not None else y.max() + 1)
    tree = DecisionTree(num_classes=num_classes)
    tree.degenerate = len(np.unique(y)) < 2

    def grow(idx: np.ndarray, depth: int) -> int:
        counts = np.bincount(y[idx], minlength=num_classes)
        split = None
        if depth < cfg.max_depth and np.count_nonzero(counts) > 1 and len(idx) >= 2 * cfg.min_leaf:
            split = _best_split(X[idx], y[idx], num_classes, cfg.min_leaf)
        if split is None:
            return tree.add_leaf(counts)
        _, f, thr = split
        node = tree.n_nodes
        tree.feature.append(f)
        tree.threshold.append(thr)
        tree.left.append(LEAF)
        tree.right.append(LEAF)
        tree.label.append(LEAF)
        tree.counts.append(counts.tolist())
        go_left = X[idx, f] <= thr
        tree.left[node] = grow(idx[go_left], depth + 1)
        tree.right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return tree


def leaf_of(tree: DecisionTree, h) -> int:
    node = 0
    while not tree.is_leaf(node):
        node = tree.left[node] if h[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return node


def predict(tree: DecisionTree, h) -> int:
    return tree.label[leaf_of(tree, np.asarray(h, dtype=np.float64))]


def predict_batch(tree: DecisionTree, latents) -> np.ndarray:
    X = np.asarray(latents, dtype=np.float64)
    out = np.empty(len(X), dtype=np.int64)
    stack = [(0, np.arange(len(X)))]
    while stack:
        node, idx = stack.pop()
        if tree.is_leaf(node):
            out[idx] = tree.label[node]
            continue
        go_left = X[idx, tree.feature[node]] <= tree.threshold[node]
        stack.append((tree.left[node], idx[go_left]))
        stack.append((tree.right[node], idx[~go_left]))
    return out


# -- rules ---------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class SplitCondition:
    feature: int
    op: str  # "<=" or ">"
    threshold: float

    def holds(self, h) -> bool:
        v = h[self.feature]
        return bool(v <= self.threshold) if self.op == "<=" else bool(v > self.threshold)

    def to_json(self) -> dict:
        return {"feature": self.feature, "op": self.op, "threshold": self.threshold}

    def __str__(self) -> str:
        return f"z{self.feature} {self.op} {self.threshold:.4g}"


@dataclass
class DecisionRule:
    premise: list[SplitCondition]
    label: int

    def holds(self, h) -> bool:
        return all(c.holds(h) for c in self.premise)

    def holds_batch(self, latents) -> np.ndarray:
        return satisfies_batch(self.premise, latents)

    def to_json(self) -> dict:
        return {"premise": [c.to_json() for c in self.premise], "label": self.label}

    def __str__(self) -> str:
        return "{" + ", ".join(map(str, self.premise)) + f"}} -> {self.label}"


@dataclass
class CounterfactualRule(DecisionRule):
    falsified_count: int = 0

    def to_json(self) -> dict:
        return {**super().to_json(), "falsified_count": self.falsified_count}


def satisfies_batch(premise, latents) -> np.ndarray:
    X = np.asarray(latents, dtype=np.float64)
    ok = np.ones(len(X), dtype=bool)
    for c in premise:
        col = X[:, c.feature]
        ok &= (col <= c.threshold) if c.op == "<=" else (col > c.threshold)
    return ok


def iter_paths(tree: DecisionTree) -> Iterator[tuple[int, list[SplitCondition]]]:
    """Every (leaf, raw root-to-leaf conditions) pair."""
    stack: list[tuple[int, list[SplitCondition]]] = [(0, [])]
    while stack:
        node, conds = stack.pop()
        if tree.is_leaf(node):
            yield node, conds
            continue
        f, t = tree.feature[node], tree.threshold[node]
        stack.append((tree.right[node], conds + [SplitCondition(f, ">", t)]))
        stack.append((tree.left[node], conds + [SplitCondition(f, "<=", t)]))


def canonicalize(conditions) -> list[SplitCondition]:
    """Collapse conditions to the tightest interval per feature, sorted by feature."""
    lower: dict[int, float] = {}
    upper: dict[int, float] = {}
    for c in conditions:
        if c.op == ">":
            lower[c.feature] = max(lower.get(c.feature, -np.inf), c.threshold)
        else:
            upper[c.feature] = min(upper.get(c.feature, np.inf), c.threshold)
    out = []
    for f in sorted(set(lower) | set(upper)):
        if f in lower:
            out.append(SplitCondition(f, ">", lower[f]))
        if f in upper:
            out.append(SplitCondition(f, "<=", upper[f]))
    return out


def feasible_box(premise, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature (lower, upper] bounds implied by the premise."""
    lo = np.full(k, -np.inf)
    hi = np.full(k, np.inf)
    for c in premise:
        if c.feature >= k:
            raise ValueError(f"condition on feature {c.feature} but k = {k}")
        if c.op == ">":
            lo[c.feature] = max(lo[c.feature], c.threshold)
        else:
            hi[c.feature] = min(hi[c.feature], c.threshold)
    return lo, hi


def is_satisfiable(premise, k: int) -> bool:
    lo, hi = feasible_box(premise, k)
    return bool(np.all(lo < hi))


def extract_rule(tree: DecisionTree, z) -> DecisionRule:
    z = np.asarray(z, dtype=np.float64)
    conds = []
    node = 0
    while not tree.is_leaf(node):
        f, t = tree.feature[node], tree.threshold[node]
        if z[f] <= t:
            conds.append(SplitCondition(f, "<=", t))
            node = tree.left[node]
        else:
            conds.append(SplitCondition(f, ">", t))
            node = tree.right[node]
    return DecisionRule(canonicalize(conds), tree.label[node])


def extract_counterfactuals(tree: DecisionTree, z, rule: DecisionRule) -> list[CounterfactualRule]:
    """Opposite-label paths that ``z`` falsifies the fewest canonical conditions of.

    Paths whose region is empty (possible in hand-built trees) are skipped.
    """
    z = np.asarray(z, dtype=np.float64)
    found = []
    for leaf, conds in iter_paths(tree):
        if tree.label[leaf] == rule.label:
            continue
        premise = canonicalize(conds)
        if not is_satisfiable(premise, len(z)):
            continue
        broken = sum(not c.holds(z) for c in premise)
        found.append((broken, leaf, premise))
    if not found:
        return []
    best = min(b for b, _, _ in found)
    return [
        CounterfactualRule(premise, tree.label[leaf], falsified_count=b)
        for b, leaf, premise in sorted(found, key=lambda t: t[1])
        if b == best
    ]
