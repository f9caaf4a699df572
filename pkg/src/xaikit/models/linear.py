"""One-vs-rest linear classifiers trained by (sub)gradient descent."""
import numpy as np


def hinge_loss(W, b, X, y, lam=0.0):
    """Mean one-vs-rest hinge loss plus ``lam/2 * ||W||^2``."""
    targets = np.where(np.arange(W.shape[0])[None, :] == y[:, None], 1.0, -1.0)
    margins = targets * (X @ W.T + b)
    return float(np.maximum(0.0, 1.0 - margins).sum(axis=1).mean() + 0.5 * lam * np.sum(W * W))


def fit_ovr(X, y, n_classes, rng, *, loss="hinge", epochs=100, learning_rate=0.01, lam=1e-4,
            batch_size=16):
    """Fit one binary scorer per class on +1/-1 targets.

    Hinge scorers use the margin subgradient, logistic scorers the sigmoid
    gradient. Training stops early once a hinge objective reaches zero.
    """
    n, d = X.shape
    W = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    targets = np.where(np.arange(n_classes)[None, :] == y[:, None], 1.0, -1.0)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            Xb, tb = X[rows], targets[rows]
            margins = tb * (Xb @ W.T + b)
            if loss == "hinge":
                coef = -tb * (margins < 1.0)
            else:
                coef = -tb / (1.0 + np.exp(np.clip(margins, -50, 50)))
            gW = coef.T @ Xb / rows.size + lam * W
            gb = coef.mean(axis=0)
            W -= learning_rate * gW
            b -= learning_rate * gb
        if loss == "hinge" and lam == 0.0 and hinge_loss(W, b, X, y) == 0.0:
            break
    return W, b
