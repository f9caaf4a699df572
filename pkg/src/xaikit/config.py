"""Run configuration: a line-oriented ``key = value`` file plus overrides.

Format: one ``key = value`` per line; ``#`` starts a comment; blank lines
are ignored; a key may appear once per file. Model hyperparameters use
``model.<kind>.<param> = <value>`` where the value is read as JSON when it
parses (``100``, ``null``, ``[300, 300]``) and as a bare string otherwise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .models import KINDS, ModelSpec
from .seeding import derive_seed


def _int(lo=None):
    def conv(s):
        try:
            v = int(s)
        except (TypeError, ValueError):
            raise ValueError(f"expected an integer, got {s!r}") from None
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        return v
    return conv


def _float(lo=None, hi=None, open_lo=False):
    def conv(s):
        try:
            v = float(s)
        except (TypeError, ValueError):
            raise ValueError(f"expected a number, got {s!r}") from None
        if lo is not None and (v < lo or (open_lo and v == lo)):
            raise ValueError(f"must be {'>' if open_lo else '>='} {lo}, got {v}")
        if hi is not None and v >= hi:
            raise ValueError(f"must be < {hi}, got {v}")
        return v
    return conv


def _choice(*options):
    def conv(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return conv


def _models(s):
    kinds = [k.strip() for k in str(s).split(",") if k.strip()]
    if not kinds:
        raise ValueError("at least one model kind is required")
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise ValueError(f"unknown model kind(s) {bad}; expected {', '.join(KINDS)}")
    return list(dict.fromkeys(kinds))


def _sample(s):
    s = str(s)
    if s in ("first-of-test", "last-of-test"):
        return s
    idx = s[len("index:"):] if s.startswith("index:") else s
    try:
        v = int(idx)
    except ValueError:
        raise ValueError("expected first-of-test, last-of-test, index:N or N") from None
    if v < 0:
        raise ValueError(f"sample index must be >= 0, got {v}")
    return f"index:{v}"


def _target(s):
    s = str(s)
    if s == "predicted":
        return s
    try:
        v = int(s)
    except ValueError:
        raise ValueError("expected 'predicted' or a class index") from None
    if v < 0:
        raise ValueError("class index must be >= 0")
    return v


def _str(s):
    return str(s)


# key -> (converter, default)
KEYS = {
    "dataset": (_str, "synthetic"),
    "label_column": (_str, "Family"),
    "top_k_families": (_int(1), 10),
    "split": (_choice("holdout", "kfold"), "holdout"),
    "folds": (_int(2), 5),
    "train_fraction": (_float(0.0, 1.0, open_lo=True), 0.8),
    "seed": (_int(0), 42),
    "workdir": (_str, "xaikit-run"),
    "models": (_models, ["forest"]),
    "synthetic.samples": (_int(20), 2000),
    "synthetic.features": (_int(1), 20),
    "synthetic.classes": (_int(2), 10),
    "rfe.size": (_int(0), 0),
    "rfe.model": (_choice("linear", "tree", "forest"), "forest"),
    "sample": (_sample, "first-of-test"),
    "target": (_target, "predicted"),
    "shap.method": (_choice("exact-subsets", "exact-permutations", "montecarlo"), "montecarlo"),
    "shap.mode": (_choice("marginal", "retrain"), "marginal"),
    "shap.samples": (_int(2), 2000),
    "shap.features": (_int(0), 0),
    "shap.rows": (_int(1), 20),
    "shap.background": (_int(1), 100),
    "lime.samples": (_int(10), 5000),
    "lime.top_k": (_int(1), 10),
    "lime.kernel_width": (_float(0.0), 0.0),
    "lime.ridge": (_float(0.0), 1.0),
    "lime.noise": (_float(0.0), 1.0),
    "perm.metric": (_choice("accuracy_drop", "mse_increase"), "accuracy_drop"),
    "perm.repeats": (_int(1), 5),
    "pdp.feature": (_str, ""),
    "pdp.interaction": (_choice("pearson", "binned"), "pearson"),
    "gradcam.epochs": (_int(0), 30),
    "gradcam.filters": (_int(1), 32),
    "gradcam.dropout": (_float(0.0, 1.0), 0.25),
    "gradcam.lr": (_float(0.0, open_lo=True), 0.05),
    "gradcam.padding": (_choice("valid", "same"), "valid"),
    "report.out": (_str, ""),
}

# components that draw randomness; each gets derive_seed(seed, name)
SEED_COMPONENTS = ("synthetic", "split", "rfe", "model", "shap", "lime", "perm", "cnn",
                   "selftest")


def _parse_model_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


@dataclass
class RunConfig:
    values: dict
    model_params: dict = field(default_factory=dict)
    source: str = "<defaults>"

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def workdir(self) -> Path:
        return Path(self.values["workdir"])

    def seed_for(self, component: str) -> int:
        return derive_seed(self.seed, component)

    def seeds(self) -> dict:
        return {"global": self.seed, **{c: self.seed_for(c) for c in SEED_COMPONENTS}}

    def model_spec(self, kind: str) -> ModelSpec:
        return ModelSpec(kind, dict(self.model_params.get(kind, {})), self.seed_for("model"))


def read_config_file(path) -> list[tuple[str, str, str]]:
    """``(key, raw value, location)`` triples from a config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    out, seen = [], set()
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{no}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigurationError(f"{path}:{no}: duplicate key {key!r}")
        seen.add(key)
        out.append((key, raw, f"{path}:{no}"))
    return out


def build_config(entries) -> RunConfig:
    """Validate every entry up front; later entries override earlier ones."""
    values = {k: d for k, (_, d) in KEYS.items()}
    model_params: dict[str, dict] = {}
    for key, raw, where in entries:
        if key.startswith("model."):
            parts = key.split(".")
            if len(parts) != 3 or parts[1] not in KINDS:
                raise ConfigurationError(f"{where}: model keys look like model.<kind>.<param>, "
                                         f"got {key!r}")
            model_params.setdefault(parts[1], {})[parts[2]] = _parse_model_value(raw)
            continue
        if key not in KEYS:
            raise ConfigurationError(f"{where}: unknown configuration key {key!r}")
        try:
            values[key] = KEYS[key][0](raw)
        except ValueError as exc:
            raise ConfigurationError(f"{where}: {key}: {exc}") from None
    cfg = RunConfig(values, model_params)
    for kind in sorted(set(model_params) | set(values["models"])):
        try:
            cfg.model_spec(kind)
        except ConfigurationError as exc:
            raise ConfigurationError(f"model.{kind}: {exc}") from None
    return cfg
