import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xaikit.data import Dataset
from xaikit.errors import ConfigurationError, ContractError, FeasibilityError
from xaikit.models import ModelSpec, train
from xaikit.shapley import (GameValueFunction, MarginalValueFunction, RetrainValueFunction,
                            ShapleyMatrix, build_value_function, forest_combine, full_mask,
                            mask_of, members, retrain_factory, shapley_exact,
                            shapley_exact_permutations, shapley_exact_subsets,
                            shapley_matrix, shapley_montecarlo, subset_weights)
from xaikit.synthetic import sign_task


def oracle(v, n):
    """Brute-force ordering average over frozensets; shares no code with the library."""
    phi = [0.0] * n
    perms = list(itertools.permutations(range(n)))
    for order in perms:
        seen = frozenset()
        for f in order:
            phi[f] += v(seen | {f}) - v(seen)
            seen = seen | {f}
    return [p / len(perms) for p in phi]


def table_game(table):
    n = int(math.log2(len(table)))
    return GameValueFunction.from_table(table), (lambda S: table[mask_of(S)]), n


class Elementwise:
    """Linear scorer evaluated column by column (no BLAS reductions)."""

    def __init__(self, w, b=0.0):
        self.w, self.b = list(w), b

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s = np.full(X.shape[0], self.b)
        for j, wj in enumerate(self.w):
            if wj != 0.0:
                s = s + wj * X[:, j]
        return np.column_stack([-s, s])


games = st.integers(1, 6).flatmap(
    lambda n: st.lists(st.floats(-10, 10, allow_nan=False), min_size=1 << n, max_size=1 << n))


# --- bitmask helpers ---------------------------------------------------------------

def test_mask_helpers():
    assert mask_of([0, 2]) == 0b101
    assert members(0b1011, 4) == [0, 1, 3]
    assert full_mask(3) == 7


def test_subset_weights_sum_to_one_over_coalitions():
    for n in range(1, 9):
        w = subset_weights(n)
        assert sum(math.comb(n - 1, s) * w[s] for s in range(n)) == pytest.approx(1.0, abs=1e-15)


# --- exact forms vs oracle --------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(games)
def test_exact_forms_match_oracle(table):
    vf, v, n = table_game(table)
    ref = oracle(v, n)
    sub = shapley_exact(vf, None, "subsets")
    per = shapley_exact(vf, None, "permutations")
    assert np.allclose(sub, ref, rtol=0, atol=1e-9)
    assert np.allclose(per, sub, rtol=0, atol=1e-9)
    for i in range(n):
        assert shapley_exact_subsets(vf, None, i) == pytest.approx(sub[i], abs=1e-9)
        assert shapley_exact_permutations(vf, None, i) == pytest.approx(sub[i], abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(games)
def test_efficiency(table):
    vf, _, n = table_game(table)
    phi = shapley_exact(vf, None)
    assert abs(table[-1] - table[0] - phi.sum()) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(games, st.data())
def test_null_feature_gets_exact_zero(table, data):
    n = int(math.log2(len(table)))
    i = data.draw(st.integers(0, n - 1))
    t = np.array(table)
    for m in range(1 << n):
        if m >> i & 1:
            t[m] = t[m ^ (1 << i)]
    vf = GameValueFunction.from_table(t)
    for method in ("subsets", "permutations"):
        assert shapley_exact(vf, None, method)[i] == 0.0
    assert shapley_montecarlo(vf, None, i, K=50, seed=1).estimate == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.data())
def test_symmetry(n, data):
    i, j = data.draw(st.lists(st.integers(0, n - 1), min_size=2, max_size=2, unique=True))
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    t = rng.normal(size=1 << n)
    # make i and j interchangeable: v(S + i) = v(S + j) for S without both
    for m in range(1 << n):
        if m >> i & 1 and not m >> j & 1:
            t[m ^ (1 << i) | (1 << j)] = t[m]
    phi = shapley_exact(GameValueFunction.from_table(t), None)
    assert abs(phi[i] - phi[j]) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_game_additivity(n, a, b, seed):
    rng = np.random.default_rng(seed)
    t1, t2 = rng.normal(size=1 << n), rng.normal(size=1 << n)
    p1 = shapley_exact(GameValueFunction.from_table(t1), None)
    p2 = shapley_exact(GameValueFunction.from_table(t2), None)
    p = shapley_exact(GameValueFunction.from_table(a * t1 + b * t2), None)
    assert np.allclose(p, a * p1 + b * p2, rtol=0, atol=1e-9)


def test_two_player_closed_form():
    t = [0.0, 1.0, 3.0, 7.0]                     # v({}), v({1}), v({2}), v({1,2})
    vf = GameValueFunction.from_table(t)
    expect = 0.5 * ((t[1] - t[0]) + (t[3] - t[2]))
    assert shapley_exact_permutations(vf, None, 0) == pytest.approx(expect, abs=1e-15)


def test_feasibility_caps():
    big = GameValueFunction(lambda m, x: 0.0, 21)
    with pytest.raises(FeasibilityError, match="montecarlo"):
        shapley_exact_subsets(big, None, 0)
    with pytest.raises(FeasibilityError):
        shapley_exact_permutations(GameValueFunction(lambda m, x: 0.0, 11), None, 0)
    with pytest.raises(FeasibilityError):
        shapley_exact(big, None)


def test_index_out_of_range():
    with pytest.raises(ContractError):
        shapley_exact_subsets(GameValueFunction(lambda m, x: 0.0, 3), None, 3)


# --- value functions -------------------------------------------------------------------

def _tiny_ds(n_features=3, seed=0):
    return sign_task(60, n_features, seed=seed)


def test_retrain_single_feature_equals_model():
    ds = _tiny_ds(1)
    spec = ModelSpec("linear", {"epochs": 5})
    vf = build_value_function("RETRAIN", retrain_factory(spec, ds), 1, target=1)
    x = ds.X[3]
    full_model = train(spec, ds)
    assert vf.value(0, x) == 0.0
    assert shapley_exact_subsets(vf, x, 0) == pytest.approx(full_model.predict_proba(x)[1],
                                                            abs=1e-12)


def test_retrain_empty_coalition_is_zero_and_cached():
    calls = []

    def factory(cols):
        calls.append(cols)
        return lambda Z: np.full((len(Z), 2), 0.5)

    vf = RetrainValueFunction(factory, 4, target=0)
    x = np.zeros(4)
    for _ in range(3):
        shapley_exact(vf, x)
    assert vf.value(0, np.ones(4)) == 0.0
    assert len(calls) == 15 and vf.trainings == 15     # 2^4 - 1, once each
    assert len(set(calls)) == 15


def test_retrain_cache_is_thread_safe():
    calls = []

    def factory(cols):
        calls.append(cols)
        return lambda Z: np.full((len(Z), 1), float(len(cols)))

    vf = RetrainValueFunction(factory, 5)
    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda m: vf.value(m, np.zeros(5)), [m for m in range(32)] * 8))
    assert sorted(calls) == sorted(set(calls)) and len(calls) == 31


def test_retrain_cap():
    with pytest.raises(FeasibilityError):
        RetrainValueFunction(lambda cols: None, 21)


def test_marginal_full_and_empty():
    rng = np.random.default_rng(0)
    bg = rng.normal(size=(30, 3))
    model = Elementwise([1.0, -2.0, 0.5], 0.3)
    vf = MarginalValueFunction(model, bg, target=1)
    x = rng.normal(size=3)
    assert vf.value(full_mask(3), x) == model.predict_proba(x)[0, 1]
    mean_out = model.predict_proba(bg)[:, 1].mean()
    assert vf.value(0, x) == pytest.approx(mean_out, abs=1e-12)
    assert vf.value(0, x) == vf.value(0, -5 * x)
    assert vf.base_value() == pytest.approx(mean_out, abs=1e-12)


def test_marginal_background_cap_and_errors():
    bg = np.random.default_rng(0).normal(size=(1000, 2))
    vf = MarginalValueFunction(Elementwise([1.0, 1.0]), bg, target=1)
    assert vf.background.shape == (256, 2)
    with pytest.raises(ConfigurationError):
        MarginalValueFunction(Elementwise([1.0]), np.zeros((0, 1)), target=1)
    with pytest.raises(ConfigurationError):
        build_value_function("KERNEL", None, bg)


def test_marginal_efficiency_rowwise():
    rng = np.random.default_rng(1)
    bg = rng.normal(size=(20, 4))
    model = Elementwise([1.0, -1.0, 2.0, 0.0])
    vf = MarginalValueFunction(model, bg, target=1)
    X = rng.normal(size=(5, 4))
    sm = shapley_matrix(vf, X)
    for r, x in enumerate(X):
        assert abs(sm.base_value + sm.phi[r].sum() - vf.value(full_mask(4), x)) <= 1e-9
    assert np.all(sm.phi[:, 3] == 0.0)


def test_matrix_argmax_is_informative_feature():
    rng = np.random.default_rng(2)
    bg = rng.normal(size=(40, 5))
    vf = MarginalValueFunction(Elementwise([0, 0, 4.0, 0, 0]), bg, target=1)
    X = rng.normal(size=(6, 5)) + np.array([0, 0, 3.0, 0, 0])
    sm = shapley_matrix(vf, X)
    assert np.all(np.argmax(np.abs(sm.phi), axis=1) == 2)


def test_single_sample_matrix_matches_scalar_calls():
    vf = GameValueFunction.from_table([0.0, 1.0, 2.0, 5.0])
    sm = shapley_matrix(vf, np.zeros((1, 2)))
    assert sm.phi.shape == (1, 2)
    assert sm.phi[0].tolist() == [shapley_exact_subsets(vf, None, 0),
                                  shapley_exact_subsets(vf, None, 1)]


def test_matrix_json_roundtrip():
    vf = GameValueFunction.from_table(np.arange(8.0))
    sm = shapley_matrix(vf, np.zeros((2, 3)), "montecarlo", K=20, seed=4)
    doc = json.loads(json.dumps(sm.to_json()))
    assert {"base_value", "feature_names", "phi", "mode", "method", "seed"} <= set(doc)
    back = ShapleyMatrix.from_json(doc)
    assert np.array_equal(back.phi, sm.phi) and back.method == "montecarlo"


def test_matrix_unknown_method():
    with pytest.raises(ConfigurationError):
        shapley_matrix(GameValueFunction.from_table([0.0, 1.0]), np.zeros((1, 1)), "kernel")


# --- Monte-Carlo -------------------------------------------------------------------------

def test_montecarlo_determinism_and_k():
    vf = GameValueFunction.from_table(np.random.default_rng(0).normal(size=32))
    a = shapley_montecarlo(vf, None, 2, K=300, seed=9)
    b = shapley_montecarlo(vf, None, 2, K=300, seed=9)
    assert a == b and a.samples == 300
    with pytest.raises(ConfigurationError):
        shapley_montecarlo(vf, None, 0, K=1)


def test_montecarlo_close_to_exact_on_games():
    rng = np.random.default_rng(5)
    hits = 0
    for t in range(40):
        n = int(rng.integers(3, 9))
        vf = GameValueFunction.from_table(rng.normal(size=1 << n))
        exact = shapley_exact(vf, None)
        i = int(rng.integers(n))
        est = shapley_montecarlo(vf, None, i, K=2000, seed=t)
        hits += abs(est.estimate - exact[i]) <= 4 * est.stderr
    assert hits >= 38


def test_montecarlo_matrix_cells_are_independent_of_layout():
    vf = GameValueFunction.from_table(np.random.default_rng(1).normal(size=16))
    X = np.zeros((3, 4))
    full = shapley_matrix(vf, X, "montecarlo", K=50, seed=3)
    again = shapley_matrix(vf, X, "montecarlo", K=50, seed=3)
    assert np.array_equal(full.phi, again.phi)
    assert full.stderr.shape == (3, 4)


# --- forest_combine --------------------------------------------------------------------

def test_forest_combine_identical_trees():
    phi = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(forest_combine([phi, phi, phi]), phi)


def test_forest_combine_errors():
    with pytest.raises(ContractError):
        forest_combine([])
    with pytest.raises(ContractError):
        forest_combine([np.zeros(2), np.zeros(3)])


def test_forest_combine_matches_whole_forest():
    ds = sign_task(150, 5, seed=7)
    forest = train(ModelSpec("forest", {"n_trees": 2, "max_depth": 3}, seed=2), ds)
    bg = ds.X[:30]

    class One:
        def __init__(self, t):
            self.t = t

        def predict_proba(self, Z):
            return self.t.vote(np.atleast_2d(Z))

    for x in ds.X[100:105]:
        whole = shapley_exact(MarginalValueFunction(forest, bg, target=1), x)
        parts = [shapley_exact(MarginalValueFunction(One(t), bg, target=1), x)
                 for t in forest.trees]
        assert np.allclose(forest_combine(parts), whole, rtol=0, atol=1e-9)


def test_target_selectors():
    bg = np.random.default_rng(0).normal(size=(10, 2))
    model = Elementwise([1.0, 1.0])
    x = np.array([0.5, 0.5])
    top = MarginalValueFunction(model, bg, target="max").value(3, x)
    assert top == model.predict_proba(x).max()
    with pytest.raises(ConfigurationError):
        MarginalValueFunction(model, bg, target=1.5)
    with pytest.raises(ContractError):
        MarginalValueFunction(model, bg, target=None).value(3, x)
