import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xaikit.data import Dataset
from xaikit.errors import ConfigurationError, ContractError, DataError, IntegrityError
from xaikit.models import ModelSpec, train
from xaikit.shapley import MarginalValueFunction, ShapleyMatrix, shapley_matrix
from xaikit.synthetic import sign_task
from xaikit.tabular_xai import (beeswarm_data, dependence_scatter, force_data, pdp_curve,
                                pdp_grid, permutation_importance, strongest_interaction,
                                summary_importance, summary_json)


def two_class(score):
    """Wrap a score function as a two-column probability model."""
    def predict(X):
        s = 1.0 / (1.0 + np.exp(-score(np.atleast_2d(X))))
        return np.column_stack([1 - s, s])
    return predict


def ds_from(X, y=None):
    X = np.asarray(X, dtype=float)
    y = np.zeros(len(X), dtype=np.int64) if y is None else np.asarray(y)
    return Dataset([f"f{j}" for j in range(X.shape[1])], X, y, ["a", "b"], "t")


def matrix(phi, names=None):
    phi = np.asarray(phi, dtype=float)
    names = names or [f"f{j}" for j in range(phi.shape[1])]
    return ShapleyMatrix(phi, 0.0, names, list(range(len(phi))), "GAME", "subsets")


# --- permutation importance -----------------------------------------------------------

def test_ignored_feature_is_exactly_zero():
    ds = sign_task(200, 4, seed=1)
    for metric in ("accuracy_drop", "mse_increase"):
        rep = permutation_importance(two_class(lambda X: 3 * X[:, 0] - X[:, 2]), ds, metric,
                                     repeats=4, seed=3)
        for name in ("f1", "f3"):
            assert rep.deltas[name] == [0.0] * 4
        assert rep.rows[0][0] == "f0"


def test_sign_task_ranks_informative_first():
    hits = 0
    for s in range(20):
        ds = sign_task(300, 10, seed=100 + s)
        model = train(ModelSpec("tree", {"max_depth": 4}, seed=s), ds)
        rep = permutation_importance(model, ds, repeats=3, seed=s)
        hits += rep.rows[0][0] == "f0"
    assert hits >= 19


def test_single_repeat_has_zero_spread_and_sorted_rows():
    ds = sign_task(100, 5, seed=2)
    rep = permutation_importance(two_class(lambda X: X @ [1.0, 0.5, 0.2, 0, 0]), ds, repeats=1,
                                 seed=0)
    assert all(s == 0.0 for _, _, s in rep.rows)
    means = [m for _, m, _ in rep.rows]
    assert means == sorted(means, reverse=True)


def test_mse_is_brier_against_one_hot():
    ds = ds_from([[0.0], [1.0]], [0, 1])
    rep = permutation_importance(lambda X: np.tile([0.25, 0.75], (len(X), 1)), ds,
                                 "mse_increase", repeats=1)
    assert rep.baseline == pytest.approx(((0.75 ** 2 + 0.75 ** 2) + (0.25 ** 2 + 0.25 ** 2)) / 2)


def test_permutation_importance_deterministic_and_errors():
    ds = sign_task(80, 3, seed=0)
    f = two_class(lambda X: X[:, 0] + X[:, 1])
    assert permutation_importance(f, ds, seed=9).rows == permutation_importance(f, ds, seed=9).rows
    with pytest.raises(ConfigurationError):
        permutation_importance(f, ds, repeats=0)
    with pytest.raises(ConfigurationError):
        permutation_importance(f, ds, metric="auc")
    with pytest.raises(DataError):
        permutation_importance(f, ds.subset([]))


def test_perm_json():
    doc = json.loads(json.dumps(permutation_importance(
        two_class(lambda X: X[:, 0]), sign_task(30, 2), repeats=2).to_json()))
    assert doc["kind"] == "perm_importance"
    assert doc["rows"][0].keys() == {"feature", "mean_drop", "spread"}


# --- partial dependence ------------------------------------------------------------------

def test_grid_policy():
    assert pdp_grid(np.array([3.0, 1.0, 1.0, 2.0])).tolist() == [1.0, 2.0, 3.0]
    discrete = np.arange(26.0).repeat(3)
    assert pdp_grid(discrete).tolist() == list(range(26))
    cont = np.linspace(-1, 4, 100)
    g = pdp_grid(cont)
    assert g.size == 20 and g[0] == -1 and g[-1] == 4
    assert np.all(np.diff(g) > 0)
    assert pdp_grid(np.arange(33.0)).size == 20


def test_pdp_constant_model():
    ds = sign_task(50, 3, seed=0)
    c = pdp_curve(lambda X: np.full(len(X), 0.3), ds, "f1")
    assert np.allclose(c.mean_response, 0.3, rtol=0, atol=1e-12)


def test_pdp_additive_model():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 2))
    g = np.sin
    h = lambda v: v ** 3            # noqa: E731
    c = pdp_curve(lambda Z: g(Z[:, 0]) + h(Z[:, 1]), ds_from(X), "f0")
    expect = g(c.grid) + np.mean(h(X[:, 1]))
    assert np.allclose(c.mean_response, expect, rtol=0, atol=1e-9)


def test_pdp_linear_slope():
    X = np.random.default_rng(1).normal(size=(40, 3))
    c = pdp_curve(lambda Z: 2.5 * Z[:, 1] - Z[:, 2], ds_from(X), 1)
    slopes = np.diff(c.mean_response) / np.diff(c.grid)
    assert np.allclose(slopes, 2.5, rtol=0, atol=1e-9)


def test_pdp_target_and_errors():
    X = np.random.default_rng(2).normal(size=(20, 2))
    f = two_class(lambda Z: Z[:, 0])
    c1 = pdp_curve(f, ds_from(X), "f0", target=1)
    c0 = pdp_curve(f, ds_from(X), "f0", target=0)
    assert np.allclose(c0.mean_response + c1.mean_response, 1.0)
    assert np.all(np.diff(c1.mean_response) > 0)
    with pytest.raises(ContractError):
        pdp_curve(f, ds_from(X), "nope", target=1)
    with pytest.raises(DataError):
        pdp_curve(f, ds_from(X).subset([]), "f0", target=1)
    doc = c1.to_json()
    assert doc["kind"] == "pdp" and len(doc["grid"]) == len(doc["mean_response"])


# --- interaction ----------------------------------------------------------------------------

def test_interaction_proportional():
    X = np.random.default_rng(0).normal(size=(10, 4))
    phi = np.zeros((10, 4))
    phi[:, 0] = -3 * X[:, 2]
    assert strongest_interaction(matrix(phi), X, 0) == 2


def test_interaction_constant_candidates():
    X = np.ones((5, 3))
    phi = np.random.default_rng(1).normal(size=(5, 3))
    assert strongest_interaction(matrix(phi), X, 1) == 0
    assert strongest_interaction(matrix(phi), X, 0) == 1


def test_interaction_errors():
    with pytest.raises(ContractError):
        strongest_interaction(matrix(np.zeros((5, 1))), np.zeros((5, 1)), 0)
    with pytest.raises(ContractError):
        strongest_interaction(matrix(np.zeros((2, 3))), np.zeros((2, 3)), 0)


def _product_games(count=20):
    for s in range(count):
        rng = np.random.default_rng(s)
        i, j, k = rng.permutation(5)[:3]
        f = lambda Z, i=i, j=j, k=k: Z[:, i] * Z[:, j] + Z[:, k]      # noqa: E731
        bg = rng.normal(size=(30, 5))
        X = rng.normal(size=(25, 5))
        yield shapley_matrix(MarginalValueFunction(f, bg), X), X, int(i), int(j)


def test_interaction_recovers_product_partner_binned():
    hits = sum(strongest_interaction(sm, X, i, "binned") == j for sm, X, i, j in _product_games())
    assert hits >= 18


def test_binned_matches_pearson_examples_and_rejects_unknown():
    X = np.random.default_rng(0).normal(size=(20, 4))
    phi = np.zeros((20, 4))
    phi[:, 0] = -3 * X[:, 2]
    assert strongest_interaction(matrix(phi), X, 0, "binned") == 2
    assert strongest_interaction(matrix(phi), np.ones((20, 4)), 1, "binned") == 0
    with pytest.raises(ConfigurationError):
        strongest_interaction(matrix(phi), X, 0, "mutual_info")


def test_dependence_scatter_shape():
    X = np.random.default_rng(3).normal(size=(6, 3))
    phi = np.column_stack([X[:, 1], X[:, 0], X[:, 2]])
    doc = dependence_scatter(matrix(phi), X, "f0")
    assert doc["interaction_feature"] == "f1" and len(doc["points"]) == 6


# --- summary / force / beeswarm ----------------------------------------------------------------

def test_summary_examples():
    assert summary_importance(matrix([[1.0, 0.5], [-1.0, 0.5]])) == [("f0", 1.0), ("f1", 0.5)]
    assert summary_importance(matrix([[0.1, -0.4, 0.0]])) == [("f1", 0.4), ("f0", 0.1),
                                                             ("f2", 0.0)]
    assert summary_importance(matrix([[0.0, 0.0]])) == [("f0", 0.0), ("f1", 0.0)]
    doc = summary_json(matrix([[1.0]]))
    assert doc["kind"] == "summary" and doc["rows"] == [{"feature": "f0", "score": 1.0}]
    with pytest.raises(ContractError):
        summary_importance(matrix(np.zeros((0, 2))))


def test_force_valid_split():
    fd = force_data([0.2, -0.1], 0.5, 0.6, sample_id=4)
    assert fd.positive == [("f0", 0.2)] and fd.negative == [("f1", -0.1)]
    doc = fd.to_json()
    assert doc["kind"] == "force" and doc["sample_id"] == 4


def test_force_all_zero():
    fd = force_data([0.0, 0.0, 0.0], 0.4, 0.4)
    assert fd.positive == [] and fd.negative == []


def test_force_integrity_error_and_sampled_bypass():
    with pytest.raises(IntegrityError):
        force_data([0.2], 0.5, 0.9)
    with pytest.warns(UserWarning):
        fd = force_data([0.2], 0.5, 0.9, exact=False)
    assert fd.unchecked


def test_force_sorted_by_magnitude():
    fd = force_data([0.1, 0.3, -0.05, -0.2], 0.0, 0.15)
    assert [f for f, _ in fd.positive] == ["f1", "f0"]
    assert [f for f, _ in fd.negative] == ["f3", "f2"]


def test_force_holds_for_exact_marginal_rows():
    rng = np.random.default_rng(4)
    f = lambda Z: np.tanh(Z[:, 0] * Z[:, 1]) + Z[:, 2] ** 2      # noqa: E731
    vf = MarginalValueFunction(f, rng.normal(size=(20, 4)))
    X = rng.normal(size=(5, 4))
    sm = shapley_matrix(vf, X)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for r in range(5):
            force_data(sm.phi[r], sm.base_value, float(f(X[r:r + 1])[0]), r, tolerance=1e-6)


def test_beeswarm_colors_and_order():
    X = np.array([[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]])
    phi = np.array([[0.1, 1.0], [0.2, -1.0], [0.0, 1.0]])
    bs = beeswarm_data(matrix(phi), X)
    assert bs.features == ["f1", "f0"]
    assert [c for _, _, c in bs.points["f0"]] == [0.0, 0.5, 1.0]
    assert [c for _, _, c in bs.points["f1"]] == [0.5, 0.5, 0.5]
    with pytest.raises(ContractError):
        beeswarm_data(matrix(phi), X[:, :1])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 4), st.integers(0, 1000))
def test_beeswarm_invariants(rows, cols, seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, size=(rows, cols)).astype(float)
    sm = matrix(rng.normal(size=(rows, cols)))
    bs = beeswarm_data(sm, X)
    assert bs.features == [f for f, _ in summary_importance(sm)]
    for name in bs.features:
        pts = bs.points[name]
        assert len(pts) == rows
        for (_, v1, c1) in pts:
            assert 0.0 <= c1 <= 1.0
            for (_, v2, c2) in pts:
                if v1 < v2:
                    assert c1 < c2
                if v1 == v2:
                    assert c1 == c2
    json.dumps(bs.to_json())
