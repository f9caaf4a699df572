"""Tabular dataset ingestion, family filtering, scaling, splits and RFE."""
from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, EmptyInputError, ParseError, StratificationError


@dataclass(frozen=True)
class Dataset:
    feature_names: list[str]
    X: np.ndarray
    y: np.ndarray
    class_names: list[str]
    provenance: str = "synthetic"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2:
            raise ConfigurationError(f"X must be 2-D, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ConfigurationError(f"X has {X.shape[0]} rows but y has {y.shape[0]} labels")
        if X.shape[1] != len(self.feature_names):
            raise ConfigurationError(
                f"X has {X.shape[1]} columns but {len(self.feature_names)} feature names")
        if len(set(self.feature_names)) != len(self.feature_names):
            dupes = sorted(k for k, v in Counter(self.feature_names).items() if v > 1)
            raise ConfigurationError(f"duplicate feature names: {dupes}")
        if y.size and (y.min() < 0 or y.max() >= len(self.class_names)):
            raise ConfigurationError("labels must index into class_names")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", list(self.feature_names))
        object.__setattr__(self, "class_names", list(self.class_names))

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        if rows.dtype != bool:
            rows = rows.astype(np.int64)
        return Dataset(self.feature_names, self.X[rows], self.y[rows], self.class_names,
                       self.provenance)

    def select_features(self, columns: Sequence[int]) -> "Dataset":
        columns = list(columns)
        return Dataset([self.feature_names[c] for c in columns], self.X[:, columns], self.y,
                       self.class_names, self.provenance)


@dataclass(frozen=True)
class StandardizerParams:
    feature_names: list[str]
    means: np.ndarray
    stddevs: np.ndarray

    def to_json(self) -> dict:
        return {"means": self.means.tolist(), "stddevs": self.stddevs.tolist(),
                "feature_names": list(self.feature_names)}

    @classmethod
    def from_json(cls, doc: dict) -> "StandardizerParams":
        return cls(list(doc["feature_names"]), np.asarray(doc["means"], dtype=float),
                   np.asarray(doc["stddevs"], dtype=float))


@dataclass(frozen=True)
class SplitPlan:
    """Partition of sample indices.

    For ``mode == "holdout"`` assignment 0 is train and 1 is test; for
    ``mode == "kfold"`` the assignment is the fold index.
    """

    mode: str
    assignments: np.ndarray
    seed: int
    k: int = 2
    train_fraction: float | None = None

    def folds(self):
        """Yield ``(train_idx, test_idx)`` pairs, one per fold (one for holdout)."""
        idx = np.arange(self.assignments.size)
        parts = [1] if self.mode == "holdout" else range(self.k)
        for p in parts:
            yield idx[self.assignments != p], idx[self.assignments == p]

    def holdout(self):
        return next(self.folds())

    def to_json(self) -> dict:
        doc = {"mode": self.mode, "seed": int(self.seed),
               "assignments": self.assignments.tolist()}
        if self.mode == "kfold":
            doc["k"] = self.k
        else:
            doc["train_fraction"] = self.train_fraction
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SplitPlan":
        return cls(doc["mode"], np.asarray(doc["assignments"], dtype=np.int64), doc["seed"],
                   doc.get("k", 2), doc.get("train_fraction"))


def load_csv(path, label_column: str = "Family") -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Labels are encoded in order of first appearance. Row numbers in parse
    errors are 1-based file lines, so the header is row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise EmptyInputError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ConfigurationError(
                f"{path}: label column {label_column!r} not in header {header}")
        label_at = header.index(label_column)
        feature_cols = [i for i in range(len(header)) if i != label_at]
        feature_names = [header[i] for i in feature_cols]

        rows, labels = [], []
        for line_no, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise ParseError(f"{path}: row {line_no} has {len(record)} fields, "
                                 f"expected {len(header)}", row=line_no)
            values = []
            for i in feature_cols:
                try:
                    values.append(float(record[i]))
                except ValueError:
                    raise ParseError(
                        f"{path}: row {line_no}, column {header[i]!r}: "
                        f"cannot parse {record[i]!r} as a number",
                        row=line_no, column=header[i]) from None
            rows.append(values)
            labels.append(record[label_at].strip())

    if not rows:
        raise EmptyInputError(f"{path}: no data rows")
    class_names = list(dict.fromkeys(labels))
    code = {name: i for i, name in enumerate(class_names)}
    return Dataset(feature_names, np.array(rows, dtype=float),
                   np.array([code[l] for l in labels], dtype=np.int64), class_names, str(path))


def filter_top_families(ds: Dataset, k: int) -> Dataset:
    """Keep the ``k`` most frequent classes, relabelled contiguously.

    Count ties go to the class listed first in ``class_names``.
    """
    if ds.n_samples == 0:
        raise EmptyInputError("cannot filter an empty dataset")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    counts = np.bincount(ds.y, minlength=ds.n_classes)
    present = [c for c in range(ds.n_classes) if counts[c] > 0]
    if k > len(present):
        warnings.warn(f"k={k} exceeds the {len(present)} distinct classes; dataset unchanged",
                      stacklevel=2)
        return ds
    # stable sort on -count keeps first-appearance order among ties
    ranked = sorted(present, key=lambda c: -counts[c])[:k]
    kept = sorted(ranked)
    mask = np.isin(ds.y, kept)
    remap = np.full(ds.n_classes, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    return Dataset(ds.feature_names, ds.X[mask], remap[ds.y[mask]],
                   [ds.class_names[c] for c in kept], ds.provenance)


def fit_standardizer(ds: Dataset) -> StandardizerParams:
    if ds.n_samples == 0:
        raise EmptyInputError("cannot fit a standardizer on zero rows")
    return StandardizerParams(list(ds.feature_names), ds.X.mean(axis=0), ds.X.std(axis=0))


def standardize(ds: Dataset, params: StandardizerParams) -> Dataset:
    if list(params.feature_names) != list(ds.feature_names):
        raise ConfigurationError(
            f"standardizer fitted on {len(params.feature_names)} features "
            f"does not match dataset with {ds.n_features}")
    scale = np.where(params.stddevs > 0, params.stddevs, 1.0)
    return Dataset(ds.feature_names, (ds.X - params.means) / scale, ds.y, ds.class_names,
                   ds.provenance)


def stratified_split(ds: Dataset, mode: str = "holdout", seed: int = 42, *, k: int = 5,
                     train_fraction: float = 0.8) -> SplitPlan:
    """Stratified holdout or k-fold assignment.

    Each class is shuffled with a generator seeded from ``seed`` and dealt
    out so every partition holds its proportional share of that class, give
    or take one sample.
    """
    rng = np.random.default_rng(seed)
    assignments = np.empty(ds.n_samples, dtype=np.int64)
    counts = np.bincount(ds.y, minlength=ds.n_classes)

    if mode == "holdout":
        if not 0.0 < train_fraction < 1.0:
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
        for c in range(ds.n_classes):
            if counts[c] == 0:
                continue
            if counts[c] < 2:
                raise StratificationError(
                    f"class {ds.class_names[c]!r} has {counts[c]} member(s); holdout needs 2")
            members = rng.permutation(np.flatnonzero(ds.y == c))
            n_test = int(round(counts[c] * (1.0 - train_fraction)))
            n_test = min(max(n_test, 1), counts[c] - 1)
            assignments[members[:n_test]] = 1
            assignments[members[n_test:]] = 0
        return SplitPlan("holdout", assignments, seed, 2, train_fraction)

    if mode == "kfold":
        if k < 2:
            raise ConfigurationError(f"k-fold needs k >= 2, got {k}")
        offset = 0
        for c in range(ds.n_classes):
            if counts[c] == 0:
                continue
            if counts[c] < k:
                raise StratificationError(
                    f"class {ds.class_names[c]!r} has {counts[c]} member(s), "
                    f"fewer than {k} folds")
            members = rng.permutation(np.flatnonzero(ds.y == c))
            # rotating the start keeps overall fold sizes balanced across classes
            assignments[members] = (np.arange(counts[c]) + offset) % k
            offset = (offset + counts[c]) % k
        return SplitPlan("kfold", assignments, seed, k, None)

    raise ConfigurationError(f"unknown split mode {mode!r}")


@dataclass
class RFEResult:
    ranking: list[str]
    curve: list[tuple[int, float]]
    surviving: dict[int, list[str]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"ranking": self.ranking,
                "curve": [{"n_features": n, "accuracy": a} for n, a in self.curve],
                "surviving": {str(n): names for n, names in self.surviving.items()}}


def rfe_select(ds: Dataset, model_spec, target_sizes: Sequence[int], seed: int = 42,
               split: SplitPlan | None = None) -> RFEResult:
    """Recursive feature elimination with a holdout accuracy curve.

    Each round trains ``model_spec`` on the surviving features and drops the
    ``ceil(0.2 * remaining)`` least important ones (at least one, never
    overshooting the next target size).
    """
    from .models import evaluate, feature_importance, train

    sizes = sorted(set(int(s) for s in target_sizes), reverse=True)
    if not sizes:
        raise ConfigurationError("target_sizes is empty")
    if sizes[-1] < 1:
        raise ConfigurationError(f"target sizes must be >= 1, got {sizes[-1]}")
    if sizes[0] > ds.n_features:
        raise ConfigurationError(
            f"target size {sizes[0]} exceeds the {ds.n_features} available features")
    if split is None:
        split = stratified_split(ds, "holdout", seed)
    train_idx, test_idx = split.holdout()
    train_ds, test_ds = ds.subset(train_idx), ds.subset(test_idx)

    remaining = list(range(ds.n_features))
    eliminated: list[int] = []
    curve: list[tuple[int, float]] = []
    surviving: dict[int, list[str]] = {}
    last_scores: dict[str, float] = {}

    for target in sizes:
        while True:
            model = train(model_spec, train_ds.select_features(remaining))
            ranking = feature_importance(model)
            scores = dict(ranking.items)
            if len(remaining) == target:
                break
            n_drop = min(max(math.ceil(len(remaining) * 0.2), 1), len(remaining) - target)
            # ascending score, ties broken toward the later feature index
            order = sorted(range(len(remaining)),
                           key=lambda j: (scores[ds.feature_names[remaining[j]]], -j))
            drop = sorted(order[:n_drop])
            for j in reversed(drop):
                eliminated.append(remaining.pop(j))
        acc = evaluate(model, test_ds.select_features(remaining)).accuracy
        curve.append((target, float(acc)))
        surviving[target] = [ds.feature_names[c] for c in remaining]
        last_scores = scores

    final = sorted(remaining, key=lambda c: -last_scores[ds.feature_names[c]])
    ranking_names = [ds.feature_names[c] for c in final + eliminated[::-1]]
    return RFEResult(ranking_names, curve, surviving)


def _replace_into(path: Path, write) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: Dataset, directory) -> None:
    """Write ``X.npy``, ``y.npy`` and ``dataset.json``; each file lands atomically."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _replace_into(directory / "X.npy", lambda fh: np.save(fh, np.ascontiguousarray(ds.X)))
    _replace_into(directory / "y.npy", lambda fh: np.save(fh, np.ascontiguousarray(ds.y)))
    meta = {"feature_names": ds.feature_names, "class_names": ds.class_names,
            "provenance": ds.provenance}
    text = (json.dumps(meta, indent=1) + "\n").encode("utf-8")
    _replace_into(directory / "dataset.json", lambda fh: fh.write(text))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "dataset.json").read_text())
    return Dataset(meta["feature_names"], np.load(directory / "X.npy"),
                   np.load(directory / "y.npy"), meta["class_names"], meta["provenance"])
