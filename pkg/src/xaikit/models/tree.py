"""Gini CART trees and bootstrap forests, array-backed."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LEAF = -1


@dataclass
class Tree:
    """Flat binary tree. ``feature[node] == -1`` marks a leaf.

    ``value`` holds the training class counts reaching each node and
    ``impurity`` their Gini index.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    impurity: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] != LEAF)
        while active.size:
            n = node[active]
            go_left = X[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] != LEAF]
        return node

    def leaf_class(self) -> np.ndarray:
        return np.argmax(self.value, axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_class()[self.apply(X)]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        counts = self.value[self.apply(X)].astype(float)
        return counts / counts.sum(axis=1, keepdims=True)

    def vote(self, X: np.ndarray) -> np.ndarray:
        """One-hot vote of the leaf majority class."""
        out = np.zeros((X.shape[0], self.value.shape[1]))
        out[np.arange(X.shape[0]), self.predict(X)] = 1.0
        return out

    def impurity_decrease(self, n_features: int) -> np.ndarray:
        """Weighted Gini decrease per feature, normalised by root sample count."""
        total = np.zeros(n_features)
        root_n = self.n_samples[0]
        for node in np.flatnonzero(self.feature != LEAF):
            l, r = self.left[node], self.right[node]
            gain = (self.n_samples[node] * self.impurity[node]
                    - self.n_samples[l] * self.impurity[l]
                    - self.n_samples[r] * self.impurity[r])
            total[self.feature[node]] += gain / root_n
        return total

    def to_json(self) -> dict:
        def node(i):
            rec = {"n_samples": int(self.n_samples[i]), "impurity": float(self.impurity[i]),
                   "value": self.value[i].tolist()}
            if self.feature[i] != LEAF:
                rec.update(feature=int(self.feature[i]), threshold=float(self.threshold[i]),
                           left=node(self.left[i]), right=node(self.right[i]))
            return rec
        return node(0)

    @classmethod
    def from_json(cls, doc: dict) -> "Tree":
        feats, thr, left, right, value, ns, imp = [], [], [], [], [], [], []

        def add(rec):
            i = len(feats)
            feats.append(LEAF); thr.append(0.0); left.append(LEAF); right.append(LEAF)
            value.append(rec["value"]); ns.append(rec["n_samples"]); imp.append(rec["impurity"])
            if "feature" in rec:
                feats[i] = rec["feature"]
                thr[i] = rec["threshold"]
                left[i] = add(rec["left"])
                right[i] = add(rec["right"])
            return i

        add(doc)
        return cls(np.array(feats, dtype=np.int64), np.array(thr), np.array(left, dtype=np.int64),
                   np.array(right, dtype=np.int64), np.array(value, dtype=np.int64),
                   np.array(ns, dtype=np.int64), np.array(imp))


def gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.dot(p, p))


def _best_split(Xn: np.ndarray, yn_onehot: np.ndarray, features: np.ndarray):
    """Best (feature, threshold, weighted child impurity) over ``features``."""
    n = Xn.shape[0]
    total = yn_onehot.sum(axis=0)
    best = (None, 0.0, np.inf)
    n_left = np.arange(1, n, dtype=float)
    n_right = n - n_left
    for f in features:
        order = np.argsort(Xn[:, f], kind="stable")
        xs = Xn[order, f]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        left_counts = np.cumsum(yn_onehot[order], axis=0)[:-1]
        right_counts = total - left_counts
        gl = 1.0 - np.einsum("ij,ij->i", left_counts, left_counts) / n_left**2
        gr = 1.0 - np.einsum("ij,ij->i", right_counts, right_counts) / n_right**2
        score = (n_left * gl + n_right * gr) / n
        score[~valid] = np.inf
        pos = int(np.argmin(score))
        if score[pos] < best[2] - 1e-12:
            mid = 0.5 * (xs[pos] + xs[pos + 1])
            if mid >= xs[pos + 1]:
                mid = xs[pos]
            best = (int(f), mid, float(score[pos]))
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, rng: np.random.Generator, *,
              max_features: int | None = None, max_depth: int | None = None,
              min_samples_split: int = 2) -> Tree:
    """Grow a CART classifier until leaves are pure or unsplittable.

    ``max_features`` candidate features are sampled without replacement at
    every node; ``None`` means all of them.
    """
    n_features = X.shape[1]
    m = n_features if max_features is None else max(1, min(max_features, n_features))
    onehot = np.eye(n_classes, dtype=np.int64)[y]

    feature, threshold, left, right, value, n_samples, impurity = [], [], [], [], [], [], []

    def new_node(idx):
        counts = onehot[idx].sum(axis=0)
        feature.append(LEAF); threshold.append(0.0); left.append(LEAF); right.append(LEAF)
        value.append(counts); n_samples.append(idx.size); impurity.append(gini(counts))
        return len(feature) - 1

    stack = [(np.arange(X.shape[0]), 0, new_node(np.arange(X.shape[0])))]
    while stack:
        idx, depth, node = stack.pop()
        if (impurity[node] <= 0.0 or idx.size < min_samples_split
                or (max_depth is not None and depth >= max_depth)):
            continue
        cand = rng.choice(n_features, size=m, replace=False) if m < n_features \
            else np.arange(n_features)
        f, thr, _ = _best_split(X[idx], onehot[idx], cand)
        if f is None:
            continue
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((ri, depth + 1, right[node]))
        stack.append((li, depth + 1, left[node]))

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value, dtype=np.int64), np.array(n_samples, dtype=np.int64),
                np.array(impurity, dtype=float))


def grow_forest(X, y, n_classes, seed, *, n_trees=100, max_features="sqrt", max_depth=None,
                bootstrap=True) -> list[Tree]:
    n, d = X.shape
    if max_features == "sqrt":
        m = math.ceil(math.sqrt(d))
    elif max_features in (None, "all"):
        m = d
    else:
        m = int(max_features)
    trees = []
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.default_rng(child)
        rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        trees.append(grow_tree(X[rows], y[rows], n_classes, rng, max_features=m,
                               max_depth=max_depth))
    return trees
