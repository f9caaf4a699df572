"""Tabular model zoo: linear one-vs-rest, CART tree, random forest, k-NN, MLP.

Every trained model exposes the same probability contract through
:meth:`TrainedModel.predict_proba`, which is what the explainers consume.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ConfigurationError, ContractError, DataError, TrainingError
from . import linear as _linear
from . import mlp as _mlp
from .metrics import ClassMetrics, Metrics, classification_metrics
from .tree import Tree, grow_forest, grow_tree

FORMAT_VERSION = 1
KINDS = ("linear", "tree", "forest", "knn", "mlp")

DEFAULTS: dict[str, dict[str, Any]] = {
    "linear": {"loss": "hinge", "epochs": 100, "learning_rate": 0.01, "lam": 1e-4,
               "batch_size": 16},
    "tree": {"max_depth": None, "max_features": None},
    "forest": {"n_trees": 100, "max_depth": None, "max_features": "sqrt", "bootstrap": True},
    "knn": {"k": 5},
    "mlp": {"hidden": [300, 300], "learning_rate": 1e-4, "epochs": 60, "batch_size": 32,
            "l2": 0.0},
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 42

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ConfigurationError(f"unknown {self.kind} hyperparameters: {sorted(unknown)}")
        merged = {**DEFAULTS[self.kind], **self.params}
        for key in ("n_trees", "k", "epochs", "batch_size"):
            if key in merged and (int(merged[key]) != merged[key] or merged[key] < 0
                                  or (key != "epochs" and merged[key] < 1)):
                raise ConfigurationError(f"{self.kind}.{key} must be a positive integer")
        if "learning_rate" in merged and not merged["learning_rate"] > 0:
            raise ConfigurationError(f"{self.kind}.learning_rate must be positive")
        if self.kind == "linear" and merged["loss"] not in ("hinge", "logistic"):
            raise ConfigurationError(f"linear.loss must be hinge or logistic")
        if merged.get("max_depth") is not None and merged["max_depth"] < 1:
            raise ConfigurationError(f"{self.kind}.max_depth must be >= 1")
        if self.kind == "mlp":
            merged["hidden"] = [int(h) for h in merged["hidden"]]
            if any(h < 1 for h in merged["hidden"]):
                raise ConfigurationError("mlp.hidden sizes must be positive")
        object.__setattr__(self, "params", merged)

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": self.params, "seed": self.seed}

    @classmethod
    def from_json(cls, doc: dict) -> "ModelSpec":
        return cls(doc["kind"], dict(doc.get("params", {})), doc.get("seed", 42))


@dataclass(frozen=True)
class FeatureImportanceRanking:
    items: list[tuple[str, float]]
    source: str

    def names(self) -> list[str]:
        return [name for name, _ in self.items]

    def to_json(self) -> dict:
        return {"kind": "feature_importance", "source": self.source,
                "rows": [{"feature": n, "score": s} for n, s in self.items]}


class TrainedModel:
    """Base class; subclasses implement :meth:`_proba` on a 2-D batch."""

    kind: str = ""

    def __init__(self, spec: ModelSpec, class_count: int, feature_names):
        self.spec = spec
        self.class_count = class_count
        self.trained_feature_names = list(feature_names)

    @property
    def n_features(self) -> int:
        return len(self.trained_feature_names)

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X[None, :] if single else X
        if X2.ndim != 2 or X2.shape[1] != self.n_features:
            raise ContractError(
                f"{self.kind} model expects {self.n_features} features, got shape {X.shape}")
        return X2, single

    def predict_proba(self, X) -> np.ndarray:
        X2, single = self._check(X)
        p = self._proba(X2)
        return p[0] if single else p

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=-1)

    def _proba(self, X):
        raise NotImplementedError

    def _state(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> dict:
        return {"format_version": FORMAT_VERSION, "spec": self.spec.to_json(),
                "class_count": self.class_count, "feature_names": self.trained_feature_names,
                "state": self._state()}


class LinearModel(TrainedModel):
    kind = "linear"

    def __init__(self, spec, class_count, feature_names, W, b):
        super().__init__(spec, class_count, feature_names)
        self.W = np.asarray(W, dtype=float)
        self.b = np.asarray(b, dtype=float)

    def decision_function(self, X):
        X2, single = self._check(X)
        s = X2 @ self.W.T + self.b
        return s[0] if single else s

    def _proba(self, X):
        return _mlp.softmax(X @ self.W.T + self.b)

    def _state(self):
        return {"W": self.W.tolist(), "b": self.b.tolist()}


class TreeModel(TrainedModel):
    kind = "tree"

    def __init__(self, spec, class_count, feature_names, tree: Tree):
        super().__init__(spec, class_count, feature_names)
        self.tree = tree

    def _proba(self, X):
        return self.tree.predict_proba(X)

    def _state(self):
        return {"tree": self.tree.to_json()}


class ForestModel(TrainedModel):
    kind = "forest"

    def __init__(self, spec, class_count, feature_names, trees: list[Tree]):
        super().__init__(spec, class_count, feature_names)
        self.trees = trees

    def _proba(self, X):
        votes = np.zeros((X.shape[0], self.class_count))
        for t in self.trees:
            votes += t.vote(X)
        return votes / len(self.trees)

    def tree_outputs(self, X) -> list[np.ndarray]:
        """Per-tree one-hot votes; their mean is :meth:`predict_proba`."""
        X2, _ = self._check(X)
        return [t.vote(X2) for t in self.trees]

    def _state(self):
        return {"trees": [t.to_json() for t in self.trees]}


class KNNModel(TrainedModel):
    kind = "knn"

    def __init__(self, spec, class_count, feature_names, X, y):
        super().__init__(spec, class_count, feature_names)
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=np.int64)

    def neighbors(self, X) -> np.ndarray:
        """Indices of the k nearest training rows; distance ties go to the lower index."""
        X2, _ = self._check(X)
        k = min(self.spec.params["k"], self.X.shape[0])
        out = np.empty((X2.shape[0], k), dtype=np.int64)
        chunk = max(1, 2**22 // max(1, self.X.size))
        for start in range(0, X2.shape[0], chunk):
            diff = X2[start:start + chunk, None, :] - self.X[None, :, :]
            d2 = np.einsum("qtf,qtf->qt", diff, diff)
            out[start:start + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
        return out

    def _proba(self, X):
        nb = self.neighbors(X)
        out = np.zeros((X.shape[0], self.class_count))
        for c in range(self.class_count):
            out[:, c] = np.mean(self.y[nb] == c, axis=1)
        return out

    def _state(self):
        return {"X": self.X.tolist(), "y": self.y.tolist()}


class MLPModel(TrainedModel):
    kind = "mlp"

    def __init__(self, spec, class_count, feature_names, params):
        super().__init__(spec, class_count, feature_names)
        self.params = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in params]

    def logits(self, X):
        X2, single = self._check(X)
        z, _ = _mlp.forward(self.params, X2)
        return z[0] if single else z

    def _proba(self, X):
        z, _ = _mlp.forward(self.params, X)
        return _mlp.softmax(z)

    def _state(self):
        return {"layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.params]}


def train(spec: ModelSpec, train_ds) -> TrainedModel:
    """Fit ``spec`` on a :class:`~xaikit.data.Dataset`; deterministic in ``spec.seed``."""
    X, y = train_ds.X, train_ds.y
    if X.shape[0] == 0:
        raise TrainingError("training set is empty")
    if not np.all(np.isfinite(X)):
        raise DataError("training features contain NaN or Inf")
    if np.unique(y).size < 2:
        raise TrainingError("training set contains a single class")
    C = train_ds.n_classes
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    names = train_ds.feature_names

    if spec.kind == "linear":
        W, b = _linear.fit_ovr(X, y, C, rng, loss=p["loss"], epochs=p["epochs"],
                               learning_rate=p["learning_rate"], lam=p["lam"],
                               batch_size=p["batch_size"])
        return LinearModel(spec, C, names, W, b)
    if spec.kind == "tree":
        tree = grow_tree(X, y, C, rng, max_features=p["max_features"], max_depth=p["max_depth"])
        return TreeModel(spec, C, names, tree)
    if spec.kind == "forest":
        trees = grow_forest(X, y, C, spec.seed, n_trees=p["n_trees"],
                            max_features=p["max_features"], max_depth=p["max_depth"],
                            bootstrap=p["bootstrap"])
        return ForestModel(spec, C, names, trees)
    if spec.kind == "knn":
        return KNNModel(spec, C, names, X.copy(), y.copy())
    params = _mlp.fit(X, y, C, rng, hidden=p["hidden"], learning_rate=p["learning_rate"],
                      epochs=p["epochs"], batch_size=p["batch_size"], l2=p["l2"])
    return MLPModel(spec, C, names, params)


def predict_proba(model: TrainedModel, x) -> np.ndarray:
    return model.predict_proba(x)


def evaluate(model: TrainedModel, test_ds, averaging: str = "weighted") -> Metrics:
    if test_ds.n_samples == 0:
        raise DataError("test set is empty")
    if list(test_ds.feature_names) != model.trained_feature_names:
        raise ContractError("test features do not match the model's training features")
    pred = model.predict(test_ds.X)
    return classification_metrics(test_ds.y, pred, model.class_count, averaging,
                                  test_ds.class_names[:model.class_count])


def _ranking(names, scores, source) -> FeatureImportanceRanking:
    order = sorted(range(len(names)), key=lambda i: (-scores[i], i))
    return FeatureImportanceRanking([(names[i], float(scores[i])) for i in order], source)


def linear_importance(model: TrainedModel) -> FeatureImportanceRanking:
    """Mean absolute one-vs-rest weight per feature."""
    if not isinstance(model, LinearModel):
        raise ContractError(f"linear_importance needs a linear model, got {model.kind}")
    return _ranking(model.trained_feature_names, np.abs(model.W).mean(axis=0), "linear_weights")


def forest_importance(model: TrainedModel) -> FeatureImportanceRanking:
    """Gini decrease per feature averaged over trees, normalised to sum to 1."""
    if isinstance(model, TreeModel):
        trees = [model.tree]
    elif isinstance(model, ForestModel):
        trees = model.trees
    else:
        raise ContractError(f"forest_importance needs a tree or forest, got {model.kind}")
    total = np.mean([t.impurity_decrease(model.n_features) for t in trees], axis=0)
    s = total.sum()
    if s > 0:
        total = total / s
    return _ranking(model.trained_feature_names, total, "forest_impurity")


def feature_importance(model: TrainedModel) -> FeatureImportanceRanking:
    if isinstance(model, LinearModel):
        return linear_importance(model)
    return forest_importance(model)


def model_from_json(doc: dict) -> TrainedModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format version {doc.get('format_version')}")
    spec = ModelSpec.from_json(doc["spec"])
    C, names, st = doc["class_count"], doc["feature_names"], doc["state"]
    if spec.kind == "linear":
        return LinearModel(spec, C, names, st["W"], st["b"])
    if spec.kind == "tree":
        return TreeModel(spec, C, names, Tree.from_json(st["tree"]))
    if spec.kind == "forest":
        return ForestModel(spec, C, names, [Tree.from_json(t) for t in st["trees"]])
    if spec.kind == "knn":
        return KNNModel(spec, C, names, st["X"], st["y"])
    return MLPModel(spec, C, names, [(l["W"], l["b"]) for l in st["layers"]])


__all__ = [
    "ClassMetrics", "FeatureImportanceRanking", "ForestModel", "KNNModel", "LinearModel",
    "MLPModel", "Metrics", "ModelSpec", "TrainedModel", "TreeModel", "classification_metrics",
    "evaluate", "feature_importance", "forest_importance", "linear_importance",
    "model_from_json", "predict_proba", "train",
]
