"""Command-line pipeline: prepare, train, evaluate, explain, report, selftest.

Work directory layout::

    <workdir>/data/      X.npy, y.npy, dataset.json, standardizer.json, split.json[, rfe.json]
    <workdir>/models/    <kind>.json (and cnn.json after ``explain gradcam``)
    <workdir>/metrics/   <kind>.json
    <workdir>/explain/   one JSON record per explanation output
    <workdir>/report/    SVG + JSON bundle with manifest.json

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical or feasibility error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import KEYS, RunConfig, build_config, read_config_file
from .convnet import pack_image, train_cnn
from .data import (SplitPlan, Dataset, filter_top_families, fit_standardizer, load_csv,
                   load_dataset, rfe_select, save_dataset, standardize, stratified_split)
from .errors import (ConfigurationError, ContractError, DataError, FeasibilityError, XaiError)
from .gradcam import gradcam_heatmap
from .lime import PerturbationConfig, explain_instance
from .models import (ModelSpec, evaluate, feature_importance, model_from_json, train)
from .report import atomic_write, dumps, emit_bundle
from .shapley import (PERMUTATION_CAP, RETRAIN_CAP, SUBSET_CAP, MarginalValueFunction,
                      RetrainValueFunction, ShapleyMatrix, empty_value, full_mask,
                      retrain_factory, shapley_exact, shapley_montecarlo)
from .seeding import rng_for
from .synthetic import gaussian_classes
from .tabular_xai import (beeswarm_data, dependence_scatter, force_data, pdp_curve,
                          permutation_importance, summary_json)

log = logging.getLogger("xaikit")

EXPLAIN_METHODS = ("shap", "lime", "perm", "pdp", "gradcam", "weights")
SHAP_METHODS = {"exact-subsets": "subsets", "exact-permutations": "permutations",
                "montecarlo": "montecarlo"}


class UsageError(XaiError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------- parsing

def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="key=value configuration file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    g.add_argument("--workdir", dest="workdir", help="work directory (default xaikit-run)")
    g.add_argument("--seed", dest="seed", help="global seed (default 42)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xaikit", description="Explainability toolkit for tabular classifiers.")
    parser.add_argument("--version", action="version", version=f"xaikit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("prepare", help="load, filter, standardize and split a dataset")
    _common(p)
    p.add_argument("--dataset", dest="dataset", help="CSV path, or 'synthetic'")
    p.add_argument("--label-column", dest="label_column")
    p.add_argument("--top-k-families", dest="top_k_families")
    p.add_argument("--split", dest="split", help="holdout or kfold")
    p.add_argument("--folds", dest="folds")
    p.add_argument("--rfe", dest="rfe.size", help="reduce to this many features with RFE")

    for name, text in (("train", "train the configured models"),
                       ("evaluate", "evaluate trained models and write metrics")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--models", dest="models", help="comma-separated model kinds")

    p = sub.add_parser("explain", help="run one explanation method")
    ex = p.add_subparsers(dest="method", metavar="METHOD", required=True)
    for method in EXPLAIN_METHODS:
        q = ex.add_parser(method, help=f"{method} explanation")
        _common(q)
        q.add_argument("--model", help="which trained model to explain (default: first configured)")
        q.add_argument("--sample", dest="sample",
                       help="first-of-test, last-of-test or index:N (row of the prepared data)")
        q.add_argument("--target", dest="target", help="'predicted' or a class index")
        if method == "shap":
            q.add_argument("--method", dest="shap.method", help=", ".join(SHAP_METHODS))
            q.add_argument("--mode", dest="shap.mode", help="marginal or retrain")
            q.add_argument("--samples", dest="shap.samples", help="Monte-Carlo permutations K")
            q.add_argument("--features", dest="shap.features",
                           help="attribute only the N top-ranked features (0 = all)")
            q.add_argument("--rows", dest="shap.rows", help="test rows in the summary")
            q.add_argument("--background", dest="shap.background",
                           help="background rows for the marginal mode")
        elif method == "lime":
            q.add_argument("--samples", dest="lime.samples")
            q.add_argument("--top-k", dest="lime.top_k")
            q.add_argument("--kernel-width", dest="lime.kernel_width")
        elif method == "perm":
            q.add_argument("--metric", dest="perm.metric")
            q.add_argument("--repeats", dest="perm.repeats")
        elif method == "pdp":
            q.add_argument("--feature", dest="pdp.feature")
            q.add_argument("--interaction", dest="pdp.interaction",
                           help="partner search for the dependence scatter: pearson or binned")
        elif method == "gradcam":
            q.add_argument("--epochs", dest="gradcam.epochs")
            q.add_argument("--padding", dest="gradcam.padding")

    p = sub.add_parser("report", help="render the explanation records into an SVG bundle")
    _common(p)
    p.add_argument("--out", dest="report.out", help="bundle directory (default <workdir>/report)")

    p = sub.add_parser("selftest", help="run the bundled synthetic-data property suites")
    _common(p)
    p.add_argument("--out", dest="selftest_out", help="also write a report bundle here")
    return parser


def config_from_args(args) -> RunConfig:
    entries = read_config_file(args.config) if args.config else []
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        entries.append((k.strip(), v.strip(), "--set"))
    flags = vars(args)
    for key in KEYS:
        if flags.get(key) is not None:
            entries.append((key, str(flags[key]), f"--{key}"))
    cfg = build_config(entries)
    cfg.source = args.config or "<defaults>"
    return cfg


# ------------------------------------------------------------------ workdir io

def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, dumps(doc))


def _read_json(path: Path, hint: str):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path} not found; run `xaikit {hint}` first") from None


def _load_prepared(cfg: RunConfig) -> tuple[Dataset, SplitPlan]:
    data = cfg.workdir / "data"
    if not (data / "dataset.json").exists():
        raise DataError(f"no prepared dataset in {data}; run `xaikit prepare` first")
    return load_dataset(data), SplitPlan.from_json(_read_json(data / "split.json", "prepare"))


def _primary(split: SplitPlan):
    # holdout: the single split; kfold: fold 0 is held out
    return next(split.folds())


def _load_model(cfg: RunConfig, kind: str):
    return model_from_json(_read_json(cfg.workdir / "models" / f"{kind}.json", "train"))


def _pick_model(cfg: RunConfig, args) -> str:
    kind = args.model or cfg["models"][0]
    if kind not in cfg["models"]:
        raise ConfigurationError(f"model {kind!r} is not among the configured models "
                                 f"{cfg['models']}")
    return kind


def _sample_index(cfg: RunConfig, ds: Dataset, test_idx) -> int:
    sel = cfg["sample"]
    if sel == "first-of-test":
        return int(test_idx[0])
    if sel == "last-of-test":
        return int(test_idx[-1])
    idx = int(sel.split(":", 1)[1])
    if idx >= ds.n_samples:
        raise ConfigurationError(f"sample index {idx} out of range for {ds.n_samples} rows")
    return idx


def _target_class(cfg: RunConfig, model, x, n_classes: int) -> int:
    t = cfg["target"]
    if t == "predicted":
        return int(model.predict(x[None, :])[0])
    if t >= n_classes:
        raise ConfigurationError(f"target class {t} out of range for {n_classes} classes")
    return int(t)


def _ranked_names(model) -> list[str]:
    if model.spec.kind in ("linear", "tree", "forest"):
        return feature_importance(model).names()
    return list(model.trained_feature_names)


# -------------------------------------------------------------------- commands

def cmd_prepare(cfg: RunConfig, args) -> int:
    if cfg["dataset"] == "synthetic":
        ds = gaussian_classes(cfg["synthetic.samples"], cfg["synthetic.features"],
                              cfg["synthetic.classes"], seed=cfg.seed_for("synthetic"))
    else:
        try:
            ds = load_csv(cfg["dataset"], cfg["label_column"])
        except OSError as exc:
            raise DataError(f"cannot read dataset {cfg['dataset']}: {exc.strerror}") from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds = filter_top_families(ds, cfg["top_k_families"])
    for w in caught:
        log.warning("%s", w.message)
    params = fit_standardizer(ds)
    ds = standardize(ds, params)
    split = stratified_split(ds, cfg["split"], cfg.seed_for("split"), k=cfg["folds"],
                             train_fraction=cfg["train_fraction"])
    data = cfg.workdir / "data"
    if 0 < cfg["rfe.size"] < ds.n_features:
        spec = ModelSpec(cfg["rfe.model"], dict(cfg.model_params.get(cfg["rfe.model"], {})),
                         cfg.seed_for("rfe"))
        holdout = split if split.mode == "holdout" else \
            SplitPlan("holdout", (split.assignments == 0).astype(np.int64), split.seed)
        rfe = rfe_select(ds, spec, [cfg["rfe.size"]], cfg.seed_for("rfe"), holdout)
        keep = [ds.feature_names.index(f) for f in rfe.surviving[cfg["rfe.size"]]]
        ds = ds.select_features(keep)
        _write_json(data / "rfe.json", rfe.to_json())
    elif cfg["rfe.size"] > ds.n_features:
        raise ConfigurationError(f"rfe.size {cfg['rfe.size']} exceeds {ds.n_features} features")
    save_dataset(ds, data)
    _write_json(data / "standardizer.json", params.to_json())
    _write_json(data / "split.json", split.to_json())
    print(f"prepared {ds.n_samples} samples x {ds.n_features} features, {ds.n_classes} classes "
          f"({split.mode}) in {data}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ds, split = _load_prepared(cfg)
    train_idx, _ = _primary(split)
    for kind in cfg["models"]:
        log.info("training %s", kind)
        model = train(cfg.model_spec(kind), ds.subset(train_idx))
        _write_json(cfg.workdir / "models" / f"{kind}.json", model.to_json())
        print(f"trained {kind} on {train_idx.size} samples")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ds, split = _load_prepared(cfg)
    train_idx, test_idx = _primary(split)
    models = {kind: _load_model(cfg, kind) for kind in cfg["models"]}
    print(f"{'model':<8} {'accuracy':>9} {'precision':>10} {'recall':>8} {'f1':>8}")
    for kind, model in models.items():
        m = evaluate(model, ds.subset(test_idx))
        doc = {"kind": "metrics", "model": kind, "split": split.mode, "holdout": m.to_json()}
        if split.mode == "kfold":
            folds = [m.to_json()]
            for fold, (tr, te) in enumerate(split.folds()):
                if fold == 0:
                    continue
                fm = evaluate(train(cfg.model_spec(kind), ds.subset(tr)), ds.subset(te))
                folds.append(fm.to_json())
            doc["folds"] = folds
            doc["mean_accuracy"] = float(np.mean([f["accuracy"] for f in folds]))
        _write_json(cfg.workdir / "metrics" / f"{kind}.json", doc)
        print(f"{kind:<8} {m.accuracy:>9.4f} {m.precision:>10.4f} {m.recall:>8.4f} {m.f1:>8.4f}")
    return 0


def _check_shap_feasible(cfg: RunConfig, n: int) -> None:
    method = cfg["shap.method"]
    caps = {"exact-subsets": SUBSET_CAP, "exact-permutations": PERMUTATION_CAP}
    if method in caps and n > caps[method]:
        raise FeasibilityError(
            f"{method} Shapley over {n} features exceeds the cap of {caps[method]}; "
            f"rerun with --method montecarlo, or reduce to <= {SUBSET_CAP} features with "
            f"`xaikit prepare --rfe {SUBSET_CAP}`")
    if cfg["shap.mode"] == "retrain" and n > RETRAIN_CAP:
        raise FeasibilityError(
            f"retrain mode over {n} features exceeds the cap of {RETRAIN_CAP}; use --mode "
            f"marginal or reduce features with `xaikit prepare --rfe {RETRAIN_CAP}`")


def _explain_shap(cfg, kind, model, ds, train_idx, test_idx, idx, target):
    n = ds.n_features
    if cfg["shap.mode"] == "marginal":
        vf = MarginalValueFunction(model, ds.X[train_idx], target,
                                   max_background=cfg["shap.background"],
                                   seed=cfg.seed_for("shap"))
    else:
        vf = RetrainValueFunction(retrain_factory(cfg.model_spec(kind), ds.subset(train_idx)), n,
                                  target)
    rows = [idx] + [int(r) for r in test_idx if r != idx][:cfg["shap.rows"] - 1]
    ranked = _ranked_names(model)
    k = cfg["shap.features"] if 0 < cfg["shap.features"] < n else n
    cols = sorted(ds.feature_names.index(f) for f in ranked[:k])
    method = SHAP_METHODS[cfg["shap.method"]]
    X = ds.X[rows]
    phi = np.empty((len(rows), len(cols)))
    stderr = None
    if method == "montecarlo":
        seed = cfg.seed_for("shap")
        stderr = np.empty_like(phi)
        for r, x in enumerate(X):
            for c, i in enumerate(cols):
                est = shapley_montecarlo(vf, x, i, cfg["shap.samples"], rng=rng_for(seed, r, i))
                phi[r, c], stderr[r, c] = est.estimate, est.stderr
    else:
        for r, x in enumerate(X):
            phi[r] = shapley_exact(vf, x, method)[cols]
    names = [ds.feature_names[i] for i in cols]
    base = empty_value(vf, X[0])
    sm = ShapleyMatrix(phi, base, names, rows, vf.mode, method,
                       cfg.seed_for("shap") if method == "montecarlo" else None, stderr)
    output = float(vf.value(full_mask(n), X[0]))
    exact = method != "montecarlo" and len(cols) == n
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        force = force_data(phi[0], base, output, idx, feature_names=names, exact=exact)
    out = cfg.workdir / "explain"
    _write_json(out / f"shap-{kind}-matrix.json", {**sm.to_json(), "target": target})
    _write_json(out / f"shap-{kind}-summary.json", summary_json(sm))
    _write_json(out / f"shap-{kind}-beeswarm.json", beeswarm_data(sm, X[:, cols]).to_json())
    _write_json(out / f"shap-{kind}-force.json", force.to_json())
    top = ", ".join(f"{f}={v:+.4f}" for f, v in force.contributions[:5])
    print(f"shap ({cfg['shap.method']}, {vf.mode}) for sample {idx}, class {target}: {top}")


def cmd_explain(cfg: RunConfig, args) -> int:
    kind = _pick_model(cfg, args)
    ds, split = _load_prepared(cfg)
    method = args.method
    if method == "shap":
        _check_shap_feasible(cfg, ds.n_features)
    if method == "pdp" and cfg["pdp.feature"] and cfg["pdp.feature"] not in ds.feature_names:
        raise ConfigurationError(f"pdp.feature {cfg['pdp.feature']!r} is not a dataset feature")
    train_idx, test_idx = _primary(split)
    idx = _sample_index(cfg, ds, test_idx)
    model = _load_model(cfg, kind)
    x = ds.X[idx]
    target = _target_class(cfg, model, x, ds.n_classes)
    out = cfg.workdir / "explain"

    if method == "shap":
        _explain_shap(cfg, kind, model, ds, train_idx, test_idx, idx, target)
    elif method == "lime":
        pc = PerturbationConfig(cfg["lime.samples"], cfg["lime.noise"],
                                cfg["lime.kernel_width"] or None, cfg["lime.top_k"],
                                cfg["lime.ridge"], cfg.seed_for("lime"))
        std = ds.X[train_idx].std(axis=0)
        le = explain_instance(model, x, target, pc, feature_std=std,
                              feature_names=ds.feature_names)
        _write_json(out / f"lime-{kind}.json", {**le.to_json(), "sample_id": idx})
        print(f"lime for sample {idx}, class {target}: fidelity {le.fidelity:.4f}")
    elif method == "perm":
        rep = permutation_importance(model, ds.subset(test_idx), cfg["perm.metric"],
                                     cfg["perm.repeats"], cfg.seed_for("perm"))
        _write_json(out / f"perm-{kind}.json", rep.to_json())
        print("permutation importance: " +
              ", ".join(f"{f}={m:.4f}" for f, m, _ in rep.rows[:5]))
    elif method == "pdp":
        feature = cfg["pdp.feature"] or _ranked_names(model)[0]
        curve = pdp_curve(model, ds.subset(train_idx), feature, target=target)
        shap_path = out / f"shap-{kind}-matrix.json"
        if shap_path.exists():
            sm = ShapleyMatrix.from_json(json.loads(shap_path.read_text()))
            if feature in sm.feature_names:
                cols = [ds.feature_names.index(f) for f in sm.feature_names]
                try:
                    curve.scatter = dependence_scatter(sm, ds.X[sm.sample_ids][:, cols],
                                                       feature, cfg["pdp.interaction"])
                except ContractError as exc:
                    log.info("no dependence scatter: %s", exc)
        _write_json(out / f"pdp-{kind}.json", curve.to_json())
        print(f"pdp for {feature}, class {target}: {curve.grid.size} grid points")
    elif method == "gradcam":
        order = _ranked_names(model)
        names = ds.feature_names
        images = [pack_image(r, names, order).pixels for r in ds.X[train_idx]]
        cnn = train_cnn(images, ds.y[train_idx], filters=cfg["gradcam.filters"],
                        dropout=cfg["gradcam.dropout"], epochs=cfg["gradcam.epochs"],
                        lr=cfg["gradcam.lr"], seed=cfg.seed_for("cnn"), n_classes=ds.n_classes,
                        padding=cfg["gradcam.padding"])
        test_images = np.array([pack_image(r, names, order).pixels for r in ds.X[test_idx]])
        acc = float(np.mean(cnn.predict(test_images) == ds.y[test_idx]))
        img = pack_image(x, names, order)
        cls = int(cnn.predict(img.pixels[None])[0]) if cfg["target"] == "predicted" else target
        hm = gradcam_heatmap(cnn, img, cls, image_id=idx)
        _write_json(cfg.workdir / "models" / "cnn.json", cnn.to_json())
        _write_json(out / f"gradcam-{kind}.json", {**hm.to_json(), "cnn_test_accuracy": acc})
        print(f"gradcam for sample {idx}, class {cls}: grid {hm.grid.shape[0]}x"
              f"{hm.grid.shape[1]}, cnn test accuracy {acc:.4f}")
    else:
        rank = feature_importance(model)
        _write_json(out / f"weights-{kind}.json", rank.to_json())
        print(f"{rank.source}: " + ", ".join(f"{f}={s:.4f}" for f, s in rank.items[:5]))
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    reports = []
    for path in sorted((cfg.workdir / "explain").glob("*.json")):
        reports.append({"name": path.stem, "payload": json.loads(path.read_text())})
    for path in sorted((cfg.workdir / "metrics").glob("*.json")):
        reports.append({"name": f"metrics-{path.stem}", "payload": json.loads(path.read_text())})
    if not reports:
        raise DataError(f"nothing to report in {cfg.workdir}; run `xaikit explain` first")
    out = Path(cfg["report.out"]) if cfg["report.out"] else cfg.workdir / "report"
    manifest = emit_bundle(reports, out, seeds=cfg.seeds())
    print(f"wrote {len(manifest['files'])} files to {out}")
    return 0


def cmd_selftest(cfg: RunConfig, args) -> int:
    from .selftest import run_selftest
    return run_selftest(seed=cfg.seed, out=args.selftest_out)


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
            "explain": cmd_explain, "report": cmd_report, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except XaiError as exc:
        print(f"xaikit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"xaikit: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
