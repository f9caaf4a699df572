"""Global and per-sample tabular explanation records.

Every record serialises to JSON with a ``kind`` discriminator that the
report module dispatches on.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError, ContractError, DataError, IntegrityError
from .shapley import ShapleyMatrix, as_predict_fn, make_selector

PDP_DISCRETE_MAX = 32
PDP_GRID_POINTS = 20
FORCE_TOLERANCE = 1e-3


@dataclass
class PermutationImportanceReport:
    rows: list[tuple[str, float, float]]
    metric: str
    repeats: int
    seed: int
    baseline: float
    deltas: dict[str, list[float]] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {"kind": "perm_importance", "metric": self.metric, "repeats": self.repeats,
                "seed": self.seed, "baseline": self.baseline,
                "rows": [{"feature": f, "mean_drop": m, "spread": s} for f, m, s in self.rows]}


def _score(metric, proba, y):
    if metric == "accuracy_drop":
        return float(np.mean(np.argmax(proba, axis=1) == y))
    onehot = np.zeros_like(proba)
    onehot[np.arange(y.size), y] = 1.0
    return float(np.mean(np.sum((proba - onehot) ** 2, axis=1)))


def permutation_importance(model, ds, metric: str = "accuracy_drop", repeats: int = 5,
                           seed: int = 0) -> PermutationImportanceReport:
    """Performance loss when one column is shuffled, per feature.

    ``accuracy_drop`` is baseline accuracy minus shuffled accuracy;
    ``mse_increase`` is shuffled minus baseline mean squared error between
    the probability vector and the one-hot label. Each (feature, repeat)
    shuffle uses its own generator keyed by ``(seed, feature, repeat)``.
    """
    if metric not in ("accuracy_drop", "mse_increase"):
        raise ConfigurationError(f"unknown metric {metric!r}")
    if repeats < 1:
        raise ConfigurationError(f"repeats must be >= 1, got {repeats}")
    if ds.n_samples == 0:
        raise DataError("permutation importance needs a non-empty dataset")
    predict = as_predict_fn(model)
    X, y = np.asarray(ds.X), np.asarray(ds.y)
    base = _score(metric, np.asarray(predict(X)), y)

    stats, deltas = [], {}
    for j, name in enumerate(ds.feature_names):
        d = []
        for r in range(repeats):
            rng = np.random.default_rng([seed, j, r])
            Xs = X.copy()
            Xs[:, j] = rng.permutation(X[:, j])
            shuffled = _score(metric, np.asarray(predict(Xs)), y)
            d.append(base - shuffled if metric == "accuracy_drop" else shuffled - base)
        deltas[name] = d
        stats.append((name, float(np.mean(d)), float(np.max(d) - np.min(d))))
    order = sorted(range(len(stats)), key=lambda k: (-stats[k][1], k))
    return PermutationImportanceReport([stats[k] for k in order], metric, repeats, seed, base,
                                       deltas)


@dataclass
class PDPCurve:
    feature_name: str
    grid: np.ndarray
    mean_response: np.ndarray
    target: object = None
    scatter: dict | None = None

    def to_json(self) -> dict:
        doc = {"kind": "pdp", "feature": self.feature_name, "grid": self.grid.tolist(),
               "mean_response": self.mean_response.tolist(),
               "target": self.target if isinstance(self.target, (int, str, type(None)))
               else str(self.target)}
        if self.scatter is not None:
            doc["scatter"] = self.scatter
        return doc


def _feature_index(names, feature) -> int:
    if isinstance(feature, (int, np.integer)):
        if not 0 <= feature < len(names):
            raise ContractError(f"feature index {feature} out of range")
        return int(feature)
    if feature not in names:
        raise ContractError(f"unknown feature {feature!r}")
    return list(names).index(feature)


def pdp_grid(column, policy="auto") -> np.ndarray:
    """Sorted unique values for at most 32 distinct values, else 20 even steps."""
    if not isinstance(policy, str):
        grid = np.unique(np.asarray(policy, dtype=float))
        return grid
    if policy != "auto":
        raise ConfigurationError(f"unknown grid policy {policy!r}")
    uniq = np.unique(column)
    if uniq.size <= PDP_DISCRETE_MAX:
        return uniq.astype(float)
    return np.linspace(float(column.min()), float(column.max()), PDP_GRID_POINTS)


def pdp_curve(model, ds, feature, grid="auto", target=None) -> PDPCurve:
    """Average selected output with ``feature`` forced to each grid value."""
    if ds.n_samples == 0:
        raise DataError("partial dependence needs a non-empty dataset")
    j = _feature_index(ds.feature_names, feature)
    predict = as_predict_fn(model)
    select = make_selector(target)
    X = np.asarray(ds.X, dtype=float)
    values = pdp_grid(X[:, j], grid)
    Z = np.repeat(X[None, :, :], values.size, axis=0)
    Z[:, :, j] = values[:, None]
    out = select(np.asarray(predict(Z.reshape(-1, X.shape[1])))).reshape(values.size, -1)
    return PDPCurve(ds.feature_names[j], values, out.mean(axis=1), target)


def _abs_corr(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0 or not np.isfinite(den):
        return 0.0
    r = abs(float(np.dot(a, b) / den))
    return r if np.isfinite(r) else 0.0


def _binned_score(phi_i, x_i, x_j) -> float:
    """Sum of within-bin ``|corr(phi_i, x_j)|`` over bins of samples sorted by ``x_i``."""
    order = np.argsort(x_i, kind="stable")
    n_bins = max(1, min(10, order.size // 5))
    return sum(_abs_corr(phi_i[c], x_j[c]) for c in np.array_split(order, n_bins) if c.size >= 3)


def strongest_interaction(phi: ShapleyMatrix, X, feature, method: str = "pearson") -> int:
    """Index ``j != i`` maximising ``|corr(phi[:, i], X[:, j])|``; ties to the lower index.

    ``method="binned"`` sums the correlation inside bins of samples sorted
    by ``x_i``. A pure product ``x_i * x_j`` over independent features has
    near-zero global correlation with ``x_j`` but a strong one once ``x_i``
    is held roughly fixed.
    """
    if method not in ("pearson", "binned"):
        raise ConfigurationError(f"unknown interaction method {method!r}")
    X = np.asarray(X, dtype=float)
    n = phi.phi.shape[1]
    if n < 2:
        raise ContractError("interaction search needs at least two features")
    if X.shape != phi.phi.shape:
        raise ContractError(f"X shape {X.shape} does not match attributions {phi.phi.shape}")
    if phi.phi.shape[0] < 3:
        raise ContractError("interaction search needs at least three samples")
    i = _feature_index(phi.feature_names, feature)
    best, best_score = None, -1.0
    for j in range(n):
        if j == i:
            continue
        if method == "pearson":
            s = _abs_corr(phi.phi[:, i], X[:, j])
        else:
            s = _binned_score(phi.phi[:, i], X[:, i], X[:, j])
        if s > best_score:
            best, best_score = j, s
    return best


def dependence_scatter(phi: ShapleyMatrix, X, feature, method: str = "pearson") -> dict:
    """Points of a dependence plot: raw value vs attribution, coloured by the partner feature."""
    X = np.asarray(X, dtype=float)
    i = _feature_index(phi.feature_names, feature)
    j = strongest_interaction(phi, X, i, method)
    color = _color_scalars(X[:, j])
    return {"feature": phi.feature_names[i], "interaction_feature": phi.feature_names[j],
            "points": [{"x": float(a), "phi": float(b), "color": float(c)}
                       for a, b, c in zip(X[:, i], phi.phi[:, i], color)]}


def summary_importance(phi: ShapleyMatrix) -> list[tuple[str, float]]:
    """Mean absolute attribution per feature, descending; ties by feature index."""
    if phi.phi.size == 0:
        raise ContractError("summary needs a non-empty attribution matrix")
    scores = np.mean(np.abs(phi.phi), axis=0)
    order = sorted(range(scores.size), key=lambda j: (-scores[j], j))
    return [(phi.feature_names[j], float(scores[j])) for j in order]


def summary_json(phi: ShapleyMatrix) -> dict:
    return {"kind": "summary", "base_value": phi.base_value,
            "rows": [{"feature": f, "score": s} for f, s in summary_importance(phi)]}


@dataclass
class ForcePlotData:
    base_value: float
    contributions: list[tuple[str, float]]
    model_output: float
    sample_id: object
    positive: list[tuple[str, float]]
    negative: list[tuple[str, float]]
    unchecked: bool = False

    def to_json(self) -> dict:
        def rows(items):
            return [{"feature": f, "phi": v} for f, v in items]
        return {"kind": "force", "base_value": self.base_value, "model_output": self.model_output,
                "sample_id": self.sample_id, "contributions": rows(self.contributions),
                "positive": rows(self.positive), "negative": rows(self.negative),
                "unchecked": self.unchecked}


def force_data(phi_row, base_value: float, model_output: float, sample_id=0, *,
               feature_names=None, exact: bool = True,
               tolerance: float = FORCE_TOLERANCE) -> ForcePlotData:
    """Split a row of attributions into the pushes above and below the base value.

    Exact attributions must satisfy ``base + sum(phi) == output`` within
    ``tolerance``; sampled ones skip the check and are flagged ``unchecked``.
    """
    phi_row = np.asarray(phi_row, dtype=float)
    names = list(feature_names) if feature_names is not None else \
        [f"f{j}" for j in range(phi_row.size)]
    gap = base_value + float(phi_row.sum()) - model_output
    if exact and abs(gap) > tolerance:
        raise IntegrityError(
            f"sample {sample_id}: base {base_value} + sum(phi) {phi_row.sum()} differs from "
            f"model output {model_output} by {gap:.3g}")
    if not exact:
        warnings.warn(f"sample {sample_id}: sampled attributions, efficiency not checked",
                      stacklevel=2)
    items = list(zip(names, phi_row.tolist()))
    pos = sorted([it for it in items if it[1] > 0], key=lambda it: -it[1])
    neg = sorted([it for it in items if it[1] < 0], key=lambda it: it[1])
    sid = int(sample_id) if isinstance(sample_id, (int, np.integer)) else sample_id
    return ForcePlotData(float(base_value), items, float(model_output), sid, pos, neg, not exact)


def _color_scalars(column) -> np.ndarray:
    """Fractional rank in [0, 1]; tied values share their average rank."""
    column = np.asarray(column, dtype=float)
    if column.size == 1:
        return np.array([0.5])
    return (rankdata(column, method="average") - 1.0) / (column.size - 1)


@dataclass
class BeeswarmData:
    features: list[str]
    points: dict[str, list[tuple[float, float, float]]]

    def to_json(self) -> dict:
        return {"kind": "beeswarm", "features": self.features,
                "points": {f: [{"phi": p, "value": v, "color": c} for p, v, c in self.points[f]]
                           for f in self.features}}


def beeswarm_data(phi: ShapleyMatrix, X) -> BeeswarmData:
    X = np.asarray(X, dtype=float)
    if X.shape != phi.phi.shape:
        raise ContractError(f"X shape {X.shape} does not match attributions {phi.phi.shape}")
    order = [name for name, _ in summary_importance(phi)]
    points = {}
    for name in order:
        j = phi.feature_names.index(name)
        color = _color_scalars(X[:, j])
        points[name] = [(float(a), float(b), float(c))
                        for a, b, c in zip(phi.phi[:, j], X[:, j], color)]
    return BeeswarmData(order, points)
