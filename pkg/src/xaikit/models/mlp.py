"""Fully connected ReLU network with softmax cross-entropy, trained by Adam."""
import numpy as np


def init_params(sizes, rng):
    """He-initialised ``[(W, b), ...]`` for consecutive layer ``sizes``."""
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params.append((W, np.zeros(fan_out)))
    return params


def forward(params, X):
    """Return the logits and the list of layer inputs (for backprop)."""
    acts = [X]
    h = X
    for W, b in params[:-1]:
        h = np.maximum(h @ W + b, 0.0)
        acts.append(h)
    W, b = params[-1]
    return h @ W + b, acts


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grads(params, X, y, l2=0.0):
    """Mean softmax cross-entropy (+ ``l2/2 * sum W^2``) and its gradients."""
    logits, acts = forward(params, X)
    p = softmax(logits)
    n = X.shape[0]
    loss = -np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None)))
    loss += 0.5 * l2 * sum(np.sum(W * W) for W, _ in params)

    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(params)
    for layer in range(len(params) - 1, -1, -1):
        W, _ = params[layer]
        a = acts[layer]
        grads[layer] = (a.T @ delta + l2 * W, delta.sum(axis=0))
        if layer:
            delta = (delta @ W.T) * (a > 0)
    return float(loss), grads


def fit(X, y, n_classes, rng, *, hidden=(300, 300), learning_rate=1e-4, epochs=60,
        batch_size=32, l2=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    params = init_params([X.shape[1], *hidden, n_classes], rng)
    m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
    v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
    step = 0
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            _, grads = loss_and_grads(params, X[rows], y[rows], l2)
            step += 1
            corr1 = 1.0 - beta1**step
            corr2 = 1.0 - beta2**step
            new_params = []
            for i, ((W, b), (gW, gb)) in enumerate(zip(params, grads)):
                mW, mb = m[i]
                vW, vb = v[i]
                mW = beta1 * mW + (1 - beta1) * gW
                mb = beta1 * mb + (1 - beta1) * gb
                vW = beta2 * vW + (1 - beta2) * gW * gW
                vb = beta2 * vb + (1 - beta2) * gb * gb
                m[i], v[i] = (mW, mb), (vW, vb)
                W = W - learning_rate * (mW / corr1) / (np.sqrt(vW / corr2) + eps)
                b = b - learning_rate * (mb / corr1) / (np.sqrt(vb / corr2) + eps)
                new_params.append((W, b))
            params = new_params
    return params
