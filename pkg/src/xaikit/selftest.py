"""Bundled property suites on synthetic data, runnable as ``xaikit selftest``."""
from __future__ import annotations

import itertools
import time
import xml.etree.ElementTree as ET

import numpy as np

from .convnet import forward_trace, grad_wrt_conv, init_model, pack_image, scores_from_maps
from .data import stratified_split
from .errors import XaiError
from .gradcam import gradcam_heatmap
from .lime import PerturbationConfig, explain_instance
from .models import ModelSpec, train
from .models.metrics import classification_metrics
from .report import PlotSpec, emit_bundle, render_svg
from .seeding import derive_seed
from .shapley import (GameValueFunction, MarginalValueFunction, forest_combine, shapley_exact,
                      shapley_from_table_permutations, shapley_from_table_subsets,
                      shapley_matrix, shapley_montecarlo)
from .synthetic import gaussian_classes, sign_task
from .tabular_xai import (beeswarm_data, force_data, pdp_curve, permutation_importance,
                          summary_json)


class _Linear:
    """Probability-free linear scorer used as a transparent black box."""

    def __init__(self, w, b=0.0):
        self.w, self.b = np.asarray(w, dtype=float), b

    def predict_proba(self, X):
        X = np.atleast_2d(X)
        s = self.b + sum(X[:, j] * self.w[j] for j in range(self.w.size))
        return np.column_stack([-s, s])


def suite_shapley_forms(rng):
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(2, 7))
        table = rng.normal(size=1 << n)
        a = shapley_from_table_subsets(table, n)
        b = shapley_from_table_permutations(table, n)
        worst = max(worst, float(np.max(np.abs(a - b))))
    assert worst <= 1e-9, f"subset/permutation forms differ by {worst:.3g}"
    return f"30 random games, max gap {worst:.1e}"


def suite_shapley_axioms(rng):
    for _ in range(30):
        n = int(rng.integers(2, 7))
        t1, t2 = rng.normal(size=1 << n), rng.normal(size=1 << n)
        null = int(rng.integers(n))
        masks = np.arange(1 << n)
        t1[masks >> null & 1 == 1] = t1[masks[masks >> null & 1 == 1] ^ (1 << null)]
        p1 = shapley_exact(GameValueFunction.from_table(t1), None)
        p2 = shapley_exact(GameValueFunction.from_table(t2), None)
        p12 = shapley_exact(GameValueFunction.from_table(t1 + t2), None)
        assert abs(t1[-1] - t1[0] - p1.sum()) <= 1e-9, "efficiency violated"
        assert p1[null] == 0.0, "null player received credit"
        assert np.max(np.abs(p12 - p1 - p2)) <= 1e-9, "additivity violated"
        sizes = np.array([bin(m).count("1") for m in masks])
        sym = rng.normal(size=n + 1)[sizes]
        ps = shapley_exact(GameValueFunction.from_table(sym), None)
        assert np.ptp(ps) <= 1e-9, "symmetric players differ"
    return "efficiency, null, additivity and symmetry over 30 games"


def suite_montecarlo(rng):
    X = rng.normal(size=(64, 6))
    model = _Linear(rng.normal(size=6))
    vf = MarginalValueFunction(model, X, target=1)
    hits, trials = 0, 20
    for t in range(trials):
        x = rng.normal(size=6)
        exact = shapley_exact(vf, x)
        i = t % 6
        est = shapley_montecarlo(vf, x, i, K=500, seed=t)
        hits += abs(est.estimate - exact[i]) <= 4 * est.stderr + 1e-12
    assert hits >= 18, f"only {hits}/{trials} estimates within 4 standard errors"
    return f"{hits}/{trials} Monte-Carlo estimates within 4 SE"


def suite_forest_combine(rng):
    ds = sign_task(120, 4, seed=int(rng.integers(1 << 30)))
    forest = train(ModelSpec("forest", {"n_trees": 2, "max_depth": 3}, seed=3), ds)
    X = ds.X[:40]
    x = ds.X[50]
    whole = shapley_exact(MarginalValueFunction(forest, X, target=1), x)

    class _One:
        def __init__(self, tree):
            self.tree = tree

        def predict_proba(self, Z):
            return self.tree.vote(np.atleast_2d(Z))

    parts = [shapley_exact(MarginalValueFunction(_One(t), X, target=1), x) for t in forest.trees]
    gap = float(np.max(np.abs(forest_combine(parts) - whole)))
    assert gap <= 1e-9, f"per-tree combination differs by {gap:.3g}"
    return f"2-tree ensemble, gap {gap:.1e}"


def suite_lime(rng):
    w = np.array([1.5, -2.0, 0.5, 3.0])
    model = _Linear(w)
    cfg = PerturbationConfig(n_samples=2000, top_k=4, ridge=1e-6, seed=int(rng.integers(1 << 30)))
    le = explain_instance(model, rng.normal(size=4), 1, cfg, feature_names=list("abcd"))
    got = dict(le.contributions)
    rel = max(abs(got[n] - c) / abs(c) for n, c in zip("abcd", w))
    assert rel <= 0.05, f"coefficients off by {rel:.2%}"
    return f"linear black box recovered within {rel:.1e} relative"


def suite_permutation(rng):
    ds = sign_task(200, 4, seed=int(rng.integers(1 << 30)))
    model = _Linear([5.0, 0.0, 0.0, 0.0])
    rep = permutation_importance(model, ds, repeats=3, seed=1)
    scores = {f: m for f, m, _ in rep.rows}
    assert all(scores[f] == 0.0 for f in ("f1", "f2", "f3")), "ignored feature scored non-zero"
    assert rep.rows[0][0] == "f0", "informative feature not ranked first"
    one = permutation_importance(model, ds, repeats=1, seed=1)
    assert all(s == 0.0 for _, _, s in one.rows), "single repeat with non-zero spread"
    return "ignored features score 0, informative ranks first"


def suite_pdp(rng):
    ds = sign_task(100, 3, seed=int(rng.integers(1 << 30)))

    def additive(X):
        s = np.sin(X[:, 0]) + X[:, 1] ** 2 + X[:, 2]
        return np.column_stack([-s, s])

    curve = pdp_curve(additive, ds, "f0", target=1)
    expect = np.sin(curve.grid)
    gap = np.ptp(curve.mean_response - expect)
    assert gap <= 1e-9, f"additive component off by {gap:.3g}"
    return f"additive component recovered up to a constant ({gap:.1e})"


def suite_gradcam(rng):
    model = init_model((5, 5), 3, filters=3, seed=int(rng.integers(1 << 30)))
    img = rng.normal(size=(5, 5))
    trace = forward_trace(model, img)
    g = grad_wrt_conv(model, trace, 1)[0]
    num = np.zeros_like(g)
    eps = 1e-6
    for idx in itertools.product(*map(range, g.shape)):
        up, dn = trace.conv_maps.copy(), trace.conv_maps.copy()
        up[(0,) + idx] += eps
        dn[(0,) + idx] -= eps
        num[idx] = (scores_from_maps(model, up)[0, 1] - scores_from_maps(model, dn)[0, 1]) / (2 * eps)
    rel = float(np.linalg.norm(num - g) / max(np.linalg.norm(num) + np.linalg.norm(g), 1e-12))
    assert rel <= 1e-3, f"finite-difference mismatch {rel:.3g}"
    names = [f"f{i}" for i in range(468)]
    packed = pack_image(np.ones(468), names, names)
    zeros = int(np.sum(packed.pixels.ravel()[468:] == 0))
    assert packed.pixels.shape == (22, 22) and zeros == 16, "468-feature packing is not 22x22"
    hm = gradcam_heatmap(model, img, 1)
    assert hm.grid.min() >= 0 and (hm.grid.max() == 1.0 or not hm.grid.any())
    return f"gradient relative error {rel:.1e}; 468 features -> 22x22 with 16 padding cells"


def suite_metrics(rng):
    y_true = np.array([1] * 12 + [0] * 2 + [0] * 6)
    y_pred = np.array([1] * 8 + [0] * 4 + [1] * 2 + [0] * 6)
    m = classification_metrics(y_true, y_pred, 2)
    f1 = m.per_class[1].f1
    assert abs(f1 - 0.7273) <= 1e-4, f"F1 {f1:.4f} != 0.7273"
    for c in m.per_class:
        p, r = c.precision, c.recall
        assert abs(c.f1 - (2 * p * r / (p + r) if p + r else 0.0)) <= 1e-12
    return f"TP=8 FP=2 FN=4 gives F1 {f1:.4f}"


def suite_report(rng):
    spec = PlotSpec("heatmap", {"kind": "heatmap", "grid": rng.random((22, 22)).tolist()})
    root = ET.fromstring(render_svg(spec))
    cells = [e for e in root.iter() if e.get("class") == "cell"]
    assert len(cells) == 484, f"{len(cells)} heatmap cells"
    bar = PlotSpec("bar", {"kind": "summary", "rows": [{"feature": "a", "score": 2.0},
                                                       {"feature": "b", "score": 1.0}]})
    ET.fromstring(render_svg(bar))
    return "heatmap and bar SVGs are well-formed"


SUITES = [("shapley-forms", suite_shapley_forms), ("shapley-axioms", suite_shapley_axioms),
          ("shapley-montecarlo", suite_montecarlo), ("forest-combine", suite_forest_combine),
          ("lime-linear", suite_lime), ("permutation-importance", suite_permutation),
          ("partial-dependence", suite_pdp), ("gradcam", suite_gradcam),
          ("metrics", suite_metrics), ("report-svg", suite_report)]


def demo_reports(seed: int) -> list[dict]:
    """A small end-to-end explanation set on synthetic data, for the bundle."""
    ds = gaussian_classes(300, 6, 3, seed=derive_seed(seed, "synthetic"))
    tr, te = stratified_split(ds, "holdout", derive_seed(seed, "split")).holdout()
    model = train(ModelSpec("forest", {"n_trees": 10, "max_depth": 4},
                            derive_seed(seed, "model")), ds.subset(tr))
    vf = MarginalValueFunction(model, ds.X[tr], target=0, max_background=50,
                               seed=derive_seed(seed, "shap"))
    rows = te[:10]
    sm = shapley_matrix(vf, ds.X[rows], "subsets", feature_names=ds.feature_names,
                        sample_ids=[int(r) for r in rows])
    out = float(vf.value((1 << ds.n_features) - 1, ds.X[rows[0]]))
    force = force_data(sm.phi[0], sm.base_value, out, int(rows[0]),
                       feature_names=ds.feature_names)
    perm = permutation_importance(model, ds.subset(te), repeats=3, seed=derive_seed(seed, "perm"))
    pdp = pdp_curve(model, ds.subset(tr), sm.feature_names[0], target=0)
    cnn = init_model((3, 3), 3, filters=4, seed=derive_seed(seed, "cnn"))
    img = pack_image(ds.X[rows[0]], ds.feature_names, ds.feature_names)
    hm = gradcam_heatmap(cnn, img, 0, image_id=int(rows[0]))
    return [{"name": "summary", "payload": summary_json(sm)},
            {"name": "beeswarm", "payload": beeswarm_data(sm, ds.X[rows]).to_json()},
            {"name": "force", "payload": force.to_json()},
            {"name": "perm", "payload": perm.to_json()},
            {"name": "pdp", "payload": pdp.to_json()},
            {"name": "heatmap", "payload": hm.to_json()}]


def run_selftest(seed: int = 42, out=None) -> int:
    """Run every suite; exit code 0 when all pass, 3 otherwise."""
    failed = 0
    for name, fn in SUITES:
        rng = np.random.default_rng(derive_seed(seed, f"selftest.{name}"))
        start = time.perf_counter()
        try:
            detail = fn(rng)
            status = "PASS"
        except (AssertionError, XaiError, ArithmeticError) as exc:
            detail, status = str(exc) or type(exc).__name__, "FAIL"
            failed += 1
        print(f"{status} {name}: {detail} ({time.perf_counter() - start:.2f}s)")
    total = len(SUITES)
    print(f"selftest: {total - failed}/{total} suites passed")
    if out is not None:
        seeds = {"global": seed, **{c: derive_seed(seed, c) for c in
                                    ("synthetic", "split", "model", "shap", "perm", "cnn")}}
        manifest = emit_bundle(demo_reports(seed), out, seeds=seeds)
        print(f"selftest: wrote {len(manifest['files'])} files to {out}")
    return 0 if failed == 0 else 3
