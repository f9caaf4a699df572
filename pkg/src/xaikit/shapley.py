"""Shapley value attribution over feature coalitions.

A coalition is an ``int`` bitmask: bit ``j`` set means feature ``j`` is in
the coalition. A value function maps ``(coalition, x)`` to a real number
and comes in three flavours:

``RETRAIN``
    One model per coalition, trained only on the coalition's columns; the
    empty coalition is worth exactly 0.
``MARGINAL``
    A single trained model; features outside the coalition are replaced by
    background rows and the selected output is averaged over them.
``GAME``
    Any callable, used for checking the attribution formulas directly.

Attributions come from the subset-weighted sum, the ordering average over
all n! permutations, or a seeded Monte-Carlo average over random
orderings.
"""
from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, FeasibilityError
from .seeding import rng_for

SUBSET_CAP = 20
PERMUTATION_CAP = 10
RETRAIN_CAP = 20
MAX_BACKGROUND = 256
MAX_COALITIONS = 64


def mask_of(features: Sequence[int]) -> int:
    m = 0
    for f in features:
        m |= 1 << int(f)
    return m


def members(mask: int, n: int) -> list[int]:
    return [j for j in range(n) if mask >> j & 1]


def full_mask(n: int) -> int:
    return (1 << n) - 1


def _popcount(masks: np.ndarray) -> np.ndarray:
    counts = np.zeros(masks.shape, dtype=np.int64)
    m = masks.astype(np.int64).copy()
    while np.any(m):
        counts += m & 1
        m >>= 1
    return counts


def make_selector(target) -> Callable[[np.ndarray], np.ndarray]:
    """Turn a target spec into ``outputs -> (N,)``.

    ``None`` expects 1-D outputs, an ``int`` picks that class column and
    ``"max"`` takes each row's largest output (the predicted-class
    probability).
    """
    if callable(target):
        return target
    if target is None:
        def select(out):
            out = np.asarray(out, dtype=float)
            if out.ndim == 2 and out.shape[1] == 1:
                return out[:, 0]
            if out.ndim != 1:
                raise ContractError("model returns several outputs; pass a target class")
            return out
        return select
    if target == "max":
        return lambda out: np.asarray(out, dtype=float).max(axis=1)
    if isinstance(target, (int, np.integer)):
        t = int(target)
        return lambda out: np.asarray(out, dtype=float)[:, t]
    raise ConfigurationError(f"unsupported target selector {target!r}")


def as_predict_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    return model.predict_proba if hasattr(model, "predict_proba") else model


class ValueFunction:
    mode = "GAME"

    def __init__(self, n: int):
        if n < 1:
            raise ConfigurationError("a value function needs at least one feature")
        if n > MAX_COALITIONS:
            raise ConfigurationError(f"coalition bitmasks support at most {MAX_COALITIONS} features")
        self.n = n

    def value(self, mask: int, x) -> float:
        return float(self.values([mask], x)[0])

    def values(self, masks: Sequence[int], x) -> np.ndarray:
        raise NotImplementedError

    def table(self, x) -> np.ndarray:
        """Values of all ``2**n`` coalitions, indexed by bitmask."""
        return self.values(range(1 << self.n), x)

    def marginal_contributions(self, x, i: int, prefixes: np.ndarray,
                               rng: np.random.Generator) -> np.ndarray:
        """``v(P | {i}) - v(P)`` for each prefix coalition ``P`` (not containing ``i``)."""
        uniq, inv = np.unique(prefixes, return_inverse=True)
        masks = [int(m) for m in uniq]
        with_i = self.values([m | (1 << i) for m in masks], x)
        without = self.values(masks, x)
        return (with_i - without)[inv]


class GameValueFunction(ValueFunction):
    """Value function backed by an arbitrary ``fn(mask, x) -> float``."""

    mode = "GAME"

    def __init__(self, fn: Callable[[int, object], float], n: int):
        super().__init__(n)
        self.fn = fn

    @classmethod
    def from_table(cls, table) -> "GameValueFunction":
        table = np.asarray(table, dtype=float)
        n = int(round(math.log2(table.size)))
        if 1 << n != table.size:
            raise ContractError("table length must be a power of two")
        return cls(lambda mask, x: table[mask], n)

    def values(self, masks, x):
        return np.array([float(self.fn(int(m), x)) for m in masks])


class RetrainValueFunction(ValueFunction):
    """``v(S, x)`` is the output at ``x[S]`` of a model trained only on columns ``S``.

    ``factory(columns)`` must return a predictor over exactly those columns
    and be deterministic. Each coalition is trained at most once; concurrent
    requests for the same coalition wait for the first one.
    """

    mode = "RETRAIN"

    def __init__(self, factory: Callable[[tuple[int, ...]], Callable], n: int, target=None,
                 cap: int = RETRAIN_CAP):
        super().__init__(n)
        if n > cap:
            raise FeasibilityError(
                f"RETRAIN needs 2^{n} trainings; capped at n <= {cap}. Use a MARGINAL value "
                f"function or reduce the features (e.g. RFE) first")
        self.factory = factory
        self.select = make_selector(target)
        self._cache: dict[int, Callable] = {}
        self._locks: dict[int, threading.Lock] = {}
        self._guard = threading.Lock()
        self.trainings = 0

    def model_for(self, mask: int) -> Callable:
        with self._guard:
            if mask in self._cache:
                return self._cache[mask]
            lock = self._locks.setdefault(mask, threading.Lock())
        with lock:
            with self._guard:
                if mask in self._cache:
                    return self._cache[mask]
            model = self.factory(tuple(members(mask, self.n)))
            with self._guard:
                self._cache[mask] = model
                self.trainings += 1
            return model

    def values(self, masks, x):
        x = np.asarray(x, dtype=float)
        out = np.empty(len(masks))
        for k, m in enumerate(masks):
            m = int(m)
            if m == 0:
                out[k] = 0.0
                continue
            cols = members(m, self.n)
            out[k] = self.select(np.asarray(as_predict_fn(self.model_for(m))(x[None, cols])))[0]
        return out


class MarginalValueFunction(ValueFunction):
    """Interventional expectation over a background sample.

    ``v(S, x) = mean_b target(f(x_S, b_notS))``. Backgrounds larger than
    ``max_background`` rows are subsampled without replacement using
    ``seed``.
    """

    mode = "MARGINAL"

    def __init__(self, model, background, target=None, max_background: int = MAX_BACKGROUND,
                 seed: int = 0, batch_rows: int = 1 << 16):
        background = np.asarray(background, dtype=float)
        if background.ndim != 2 or background.shape[0] == 0:
            raise ConfigurationError("MARGINAL value function needs a non-empty 2-D background")
        super().__init__(background.shape[1])
        if background.shape[0] > max_background:
            rows = np.sort(np.random.default_rng(seed).choice(
                background.shape[0], size=max_background, replace=False))
            background = background[rows]
        self.background = background
        self.predict = as_predict_fn(model)
        self.select = make_selector(target)
        self.batch_rows = batch_rows

    def _eval(self, Z: np.ndarray) -> np.ndarray:
        out = np.empty(Z.shape[0])
        for start in range(0, Z.shape[0], self.batch_rows):
            out[start:start + self.batch_rows] = self.select(
                self.predict(Z[start:start + self.batch_rows]))
        return out

    def _keep(self, masks) -> np.ndarray:
        masks = np.asarray([int(m) for m in masks], dtype=np.int64)
        return (masks[:, None] >> np.arange(self.n)[None, :]) & 1 == 1

    def values(self, masks, x):
        x = np.asarray(x, dtype=float)
        B = self.background.shape[0]
        masks = list(masks)
        out = np.empty(len(masks))
        step = max(1, self.batch_rows // B)
        for start in range(0, len(masks), step):
            keep = self._keep(masks[start:start + step])                 # (m, n)
            Z = np.where(keep[:, None, :], x[None, None, :], self.background[None, :, :])
            out[start:start + step] = self._eval(Z.reshape(-1, self.n)).reshape(-1, B).mean(axis=1)
        return out

    def base_value(self) -> float:
        return float(self._eval(self.background).mean())

    def marginal_contributions(self, x, i, prefixes, rng):
        # one background row per draw keeps each draw unbiased for v(P|i) - v(P)
        x = np.asarray(x, dtype=float)
        rows = self.background[rng.integers(0, self.background.shape[0], size=len(prefixes))]
        keep = self._keep(prefixes)
        without = np.where(keep, x[None, :], rows)
        with_i = without.copy()
        with_i[:, i] = x[i]
        vals = self._eval(np.vstack([with_i, without]))
        return vals[:len(prefixes)] - vals[len(prefixes):]


def build_value_function(mode: str, model_or_factory, data, target=None, **kwargs) -> ValueFunction:
    """Construct a RETRAIN or MARGINAL value function.

    For RETRAIN, ``data`` is only used for its feature count (the factory
    owns the training data); for MARGINAL it is the background sample.
    """
    mode = mode.upper()
    if mode == "RETRAIN":
        n = data if isinstance(data, int) else np.asarray(data).shape[1]
        return RetrainValueFunction(model_or_factory, n, target, **kwargs)
    if mode == "MARGINAL":
        return MarginalValueFunction(model_or_factory, data, target, **kwargs)
    raise ConfigurationError(f"unknown value-function mode {mode!r}")


def retrain_factory(spec, ds) -> Callable[[tuple[int, ...]], Callable]:
    """Factory training ``spec`` on the given columns of ``ds``."""
    from .models import train

    def factory(columns):
        return train(spec, ds.select_features(columns)).predict_proba
    return factory


def _check_index(vf: ValueFunction, i: int):
    if not 0 <= i < vf.n:
        raise ContractError(f"feature index {i} out of range [0, {vf.n})")


def subset_weights(n: int) -> np.ndarray:
    """Weight ``1 / (n * C(n-1, |S|))`` of each coalition size ``|S| = 0..n-1``."""
    return np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])


def shapley_from_table_subsets(table: np.ndarray, n: int) -> np.ndarray:
    """All n attributions from a coalition-value table, subset-weighted form."""
    masks = np.arange(1 << n, dtype=np.int64)
    sizes = _popcount(masks)
    weights = subset_weights(n)
    phi = np.empty(n)
    for i in range(n):
        S = masks[(masks >> i & 1) == 0]
        phi[i] = np.sum((table[S | (1 << i)] - table[S]) * weights[sizes[S]])
    return phi


def shapley_from_table_permutations(table: np.ndarray, n: int) -> np.ndarray:
    """All n attributions from a coalition-value table, averaged over all n! orderings."""
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    bits = np.left_shift(1, perms)
    after = np.cumsum(bits, axis=1)          # coalition once position k is added
    before = after - bits
    contrib = table[after] - table[before]
    phi = np.zeros(n)
    np.add.at(phi, perms.ravel(), contrib.ravel())
    return phi / perms.shape[0]


def _exact_cap(vf: ValueFunction, cap: int, form: str):
    if vf.n > cap:
        raise FeasibilityError(
            f"exact {form} enumeration is capped at n <= {cap} features (got {vf.n}); "
            f"use the montecarlo method or reduce features with RFE")


def shapley_exact_subsets(vf: ValueFunction, x, i: int) -> float:
    _exact_cap(vf, SUBSET_CAP, "subset")
    _check_index(vf, i)
    n = vf.n
    weights = subset_weights(n)
    others = [j for j in range(n) if j != i]
    total = 0.0
    S_list = [mask_of(c) for r in range(n) for c in itertools.combinations(others, r)]
    with_i = vf.values([S | (1 << i) for S in S_list], x)
    without = vf.values(S_list, x)
    for S, a, b in zip(S_list, with_i, without):
        total += (a - b) * weights[bin(S).count("1")]
    return float(total)


def shapley_exact_permutations(vf: ValueFunction, x, i: int) -> float:
    _exact_cap(vf, PERMUTATION_CAP, "permutation")
    _check_index(vf, i)
    return float(shapley_from_table_permutations(vf.table(x), vf.n)[i])


def shapley_exact(vf: ValueFunction, x, method: str = "subsets") -> np.ndarray:
    """All n attributions for ``x`` from one pass over the coalition table."""
    if method == "subsets":
        _exact_cap(vf, SUBSET_CAP, "subset")
        return shapley_from_table_subsets(vf.table(x), vf.n)
    if method == "permutations":
        _exact_cap(vf, PERMUTATION_CAP, "permutation")
        return shapley_from_table_permutations(vf.table(x), vf.n)
    raise ConfigurationError(f"unknown exact method {method!r}")


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    stderr: float
    samples: int


def shapley_montecarlo(vf: ValueFunction, x, i: int, K: int = 2000, seed: int = 0,
                       rng: np.random.Generator | None = None) -> MonteCarloEstimate:
    """Average marginal contribution of feature ``i`` over ``K`` random orderings."""
    if K < 2:
        raise ConfigurationError(f"Monte-Carlo needs K >= 2 draws, got {K}")
    _check_index(vf, i)
    rng = np.random.default_rng(seed) if rng is None else rng
    perms = rng.permuted(np.tile(np.arange(vf.n), (K, 1)), axis=1)
    pos = np.argmax(perms == i, axis=1)
    bits = np.left_shift(np.int64(1), perms.astype(np.int64))
    bits[np.arange(vf.n)[None, :] >= pos[:, None]] = 0
    prefixes = bits.sum(axis=1)
    contrib = vf.marginal_contributions(x, i, prefixes, rng)
    return MonteCarloEstimate(float(contrib.mean()), float(contrib.std(ddof=1) / math.sqrt(K)), K)


@dataclass
class ShapleyMatrix:
    phi: np.ndarray
    base_value: float
    feature_names: list[str]
    sample_ids: list
    mode: str
    method: str
    seed: int | None = None
    stderr: np.ndarray | None = field(default=None, repr=False)

    @property
    def exact(self) -> bool:
        return self.method in ("subsets", "permutations")

    def to_json(self) -> dict:
        doc = {"kind": "shapley_matrix", "base_value": self.base_value,
               "feature_names": list(self.feature_names), "phi": self.phi.tolist(),
               "sample_ids": [int(s) if isinstance(s, (int, np.integer)) else s
                              for s in self.sample_ids],
               "mode": self.mode, "method": self.method, "seed": self.seed}
        if self.stderr is not None:
            doc["stderr"] = self.stderr.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ShapleyMatrix":
        stderr = doc.get("stderr")
        return cls(np.asarray(doc["phi"], dtype=float), doc["base_value"], doc["feature_names"],
                   doc.get("sample_ids", []), doc["mode"], doc["method"], doc.get("seed"),
                   None if stderr is None else np.asarray(stderr, dtype=float))


def empty_value(vf: ValueFunction, x) -> float:
    if isinstance(vf, MarginalValueFunction):
        return vf.base_value()
    return vf.value(0, x)


def shapley_matrix(vf: ValueFunction, samples, method: str = "subsets", *, K: int = 2000,
                   seed: int = 0, feature_names=None, sample_ids=None) -> ShapleyMatrix:
    """Attribution matrix, one row per sample and one column per feature.

    Monte-Carlo rows draw from generators keyed by ``(seed, row, feature)``,
    so each cell is reproducible on its own.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != vf.n:
        raise ContractError(f"samples have {samples.shape[1]} features, value function {vf.n}")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(vf.n)]
    ids = list(sample_ids) if sample_ids is not None else list(range(samples.shape[0]))
    phi = np.empty(samples.shape)
    stderr = None
    if method in ("subsets", "permutations"):
        for r, x in enumerate(samples):
            phi[r] = shapley_exact(vf, x, method)
    elif method == "montecarlo":
        stderr = np.empty(samples.shape)
        for r, x in enumerate(samples):
            for i in range(vf.n):
                est = shapley_montecarlo(vf, x, i, K, rng=rng_for(seed, r, i))
                phi[r, i], stderr[r, i] = est.estimate, est.stderr
    else:
        raise ConfigurationError(
            f"unknown method {method!r}; expected subsets, permutations or montecarlo")
    base = empty_value(vf, samples[0]) if samples.shape[0] else 0.0
    return ShapleyMatrix(phi, float(base), names, ids, vf.mode, method,
                         seed if method == "montecarlo" else None, stderr)


def forest_combine(per_tree_phi, combiner: str = "mean") -> np.ndarray:
    """Combine per-tree attributions of a vote-averaging ensemble (element-wise mean)."""
    per_tree_phi = [np.asarray(p, dtype=float) for p in per_tree_phi]
    if not per_tree_phi:
        raise ContractError("forest_combine needs at least one tree")
    shapes = {p.shape for p in per_tree_phi}
    if len(shapes) != 1:
        raise ContractError(f"per-tree attribution shapes differ: {sorted(shapes)}")
    if combiner == "mean":
        # offset from the first tree so identical trees reproduce it bit for bit
        first = per_tree_phi[0]
        return first + np.mean([p - first for p in per_tree_phi], axis=0)
    if combiner == "sum":
        return np.sum(per_tree_phi, axis=0)
    raise ConfigurationError(f"unknown combiner {combiner!r}")
