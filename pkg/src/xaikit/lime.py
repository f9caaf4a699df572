"""Local linear surrogate explanations for tabular models.

Neighbours are Gaussian perturbations of the query in standardized space,
weighted by an exponential kernel on squared distance. The surrogate keeps
the ``top_k`` features with the largest weighted covariance with the black
box output and fits a weighted ridge regression on them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, DegenerateNeighborhoodError, NumericalError
from .shapley import as_predict_fn


@dataclass(frozen=True)
class PerturbationConfig:
    n_samples: int = 5000
    noise_scale: float = 1.0
    kernel_width: float | None = None   # None -> 0.75 * sqrt(n_features)
    top_k: int = 10
    ridge: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 10:
            raise ConfigurationError(f"n_samples must be >= 10, got {self.n_samples}")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be non-negative")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise ConfigurationError("kernel_width must be positive")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be non-negative")

    def width_for(self, n_features: int) -> float:
        return self.kernel_width if self.kernel_width is not None else 0.75 * math.sqrt(n_features)


@dataclass(frozen=True)
class Surrogate:
    intercept: float
    features: list[int]
    coef: np.ndarray
    fidelity: float


@dataclass(frozen=True)
class LocalExplanation:
    target_class: int
    intercept: float
    contributions: list[tuple[str, float]]
    local_prediction: float
    black_box_prediction: float
    fidelity: float
    seed: int

    def to_json(self) -> dict:
        return {"kind": "lime", "class": self.target_class, "intercept": self.intercept,
                "contributions": [{"feature": f, "weight": w} for f, w in self.contributions],
                "fidelity": self.fidelity, "local_prediction": self.local_prediction,
                "black_box_prediction": self.black_box_prediction, "seed": self.seed}


def perturb_samples(x, feature_std, cfg: PerturbationConfig):
    """Draw ``cfg.n_samples`` neighbours of ``x``; row 0 is ``x`` itself.

    Returns ``(neighbours, distances)`` with distances measured after
    dividing each coordinate by its (non-zero) training stddev.
    """
    x = np.asarray(x, dtype=float)
    std = np.asarray(feature_std, dtype=float)
    if std.shape != x.shape:
        raise ContractError(f"feature_std has shape {std.shape}, x has {x.shape}")
    if not np.any(std > 0):
        raise DegenerateNeighborhoodError("every feature has zero stddev; nothing to perturb")
    rng = np.random.default_rng(cfg.seed)
    noise = rng.normal(size=(cfg.n_samples, x.size)) * (cfg.noise_scale * std)
    noise[0] = 0.0
    neighbours = x + noise
    scale = np.where(std > 0, std, 1.0)
    distances = np.sqrt(np.sum(((neighbours - x) / scale) ** 2, axis=1))
    return neighbours, distances


def proximity_weights(distances, kernel_width: float) -> np.ndarray:
    """``exp(-d^2 / width^2)``."""
    if not kernel_width > 0:
        raise ConfigurationError("kernel_width must be positive")
    d = np.asarray(distances, dtype=float)
    return np.exp(-(d * d) / (kernel_width * kernel_width))


def weighted_ridge(X, y, w, lam):
    """Weighted ridge with an unpenalised intercept. Returns ``(intercept, coef)``."""
    sw = w.sum()
    x_bar = w @ X / sw
    y_bar = w @ y / sw
    Xc = X - x_bar
    A = Xc.T @ (Xc * w[:, None]) + lam * np.eye(X.shape[1])
    rhs = Xc.T @ (w * (y - y_bar))
    try:
        coef = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"weighted ridge system is singular: {exc}") from None
    if not np.all(np.isfinite(coef)):
        raise NumericalError("weighted ridge produced non-finite coefficients")
    return float(y_bar - x_bar @ coef), coef


def normal_equation_residual(X, y, w, lam, intercept, coef) -> float:
    """Norm of the gradient of ``sum w (y - b - X c)^2 + lam |c|^2`` (halved)."""
    r = y - intercept - X @ coef
    g_b = -np.sum(w * r)
    g_c = -(X.T @ (w * r)) + lam * coef
    return float(np.linalg.norm(np.concatenate([[g_b], g_c])))


def fit_surrogate(neighbours, outputs, weights, cfg: PerturbationConfig) -> Surrogate:
    X = np.asarray(neighbours, dtype=float)
    y = np.asarray(outputs, dtype=float)
    w = np.asarray(weights, dtype=float)
    k = min(cfg.top_k, X.shape[1])
    if np.count_nonzero(w > 0) < k + 2:
        raise DegenerateNeighborhoodError(
            f"need at least {k + 2} neighbours with non-zero weight, got {np.count_nonzero(w > 0)}")
    sw = w.sum()
    x_bar = w @ X / sw
    spread = w @ (X - x_bar) ** 2 / sw
    if not np.any(spread > 0):
        raise DegenerateNeighborhoodError("all neighbours coincide; the surrogate is undetermined")
    y_bar = w @ y / sw
    cov = np.abs((w * (y - y_bar)) @ (X - x_bar) / sw)
    features = sorted(sorted(range(X.shape[1]), key=lambda j: (-cov[j], j))[:k])
    intercept, coef = weighted_ridge(X[:, features], y, w, cfg.ridge)

    resid = y - intercept - X[:, features] @ coef
    ss_tot = w @ (y - y_bar) ** 2
    fidelity = 0.0 if ss_tot <= 0 else float(1.0 - (w @ resid**2) / ss_tot)
    return Surrogate(intercept, features, coef, fidelity)


def explain_instance(model, x, target_class: int, cfg: PerturbationConfig = PerturbationConfig(),
                     feature_std=None, feature_names=None) -> LocalExplanation:
    """Explain ``model``'s probability of ``target_class`` near ``x``.

    ``feature_std`` defaults to ones, which is right for standardized data.
    Positive weights push the prediction toward ``target_class``.
    """
    x = np.asarray(x, dtype=float)
    names = list(feature_names) if feature_names is not None else \
        list(getattr(model, "trained_feature_names", [f"f{j}" for j in range(x.size)]))
    std = np.ones_like(x) if feature_std is None else np.asarray(feature_std, dtype=float)
    predict = as_predict_fn(model)

    neighbours, distances = perturb_samples(x, std, cfg)
    probs = np.asarray(predict(neighbours), dtype=float)
    if probs.ndim != 2 or not 0 <= target_class < probs.shape[1]:
        raise ContractError(f"target_class {target_class} not available in model output")
    outputs = probs[:, target_class]
    weights = proximity_weights(distances, cfg.width_for(x.size))
    sur = fit_surrogate(neighbours, outputs, weights, cfg)

    order = sorted(range(len(sur.features)), key=lambda k: (-abs(sur.coef[k]), sur.features[k]))
    contributions = [(names[sur.features[k]], float(sur.coef[k])) for k in order]
    local = float(sur.intercept + x[sur.features] @ sur.coef)
    return LocalExplanation(int(target_class), sur.intercept, contributions, local,
                            float(outputs[0]), sur.fidelity, cfg.seed)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))
