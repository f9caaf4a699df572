"""Synthetic datasets used by the self-test and the test suite."""
import numpy as np

from .data import Dataset


def gaussian_classes(n_samples=2000, n_features=20, n_classes=10, seed=0, separation=1.25,
                     noise=1.0) -> Dataset:
    """Classes drawn around Gaussian means ``N(0, separation^2)`` with isotropic noise.

    Samples are dealt round-robin so every class has ``n_samples / n_classes``
    members (give or take one).
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(n_classes, n_features))
    y = np.arange(n_samples) % n_classes
    y = y[rng.permutation(n_samples)]
    X = means[y] + rng.normal(0.0, noise, size=(n_samples, n_features))
    return Dataset([f"f{i}" for i in range(n_features)], X, y,
                   [f"family_{c}" for c in range(n_classes)], "synthetic")


def sign_task(n_samples=300, n_features=10, seed=0, informative=0) -> Dataset:
    """Binary labels from the sign of one feature; every other column is noise."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_samples, n_features))
    y = (X[:, informative] > 0).astype(np.int64)
    return Dataset([f"f{i}" for i in range(n_features)], X, y, ["neg", "pos"], "synthetic")


def blobs(n_samples=200, seed=0, centers=((-2.0, -2.0), (2.0, 2.0)), noise=1.0) -> Dataset:
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    y = np.arange(n_samples) % len(centers)
    X = centers[y] + rng.normal(0.0, noise, size=(n_samples, centers.shape[1]))
    return Dataset([f"f{i}" for i in range(centers.shape[1])], X, y,
                   [f"c{i}" for i in range(len(centers))], "synthetic")
