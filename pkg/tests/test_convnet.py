import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xaikit.convnet import (ConvNetModel, ImageSample, forward_trace, grad_wrt_conv, init_model,
                            loss_and_grads, pack_image, scores_from_maps, to_pgm, train_cnn,
                            unpack_image)
from xaikit.errors import ConfigurationError, ContractError, DataError

NAMES = [f"f{i}" for i in range(468)]


def _model(shape=(4, 4), classes=2, filters=1, seed=0, padding="valid", bias=True):
    m = init_model(shape, classes, filters=filters, seed=seed, padding=padding)
    if bias:
        rng = np.random.default_rng(seed + 100)
        m.conv_b[:] = rng.normal(0, 0.1, size=m.conv_b.shape)
        m.dense_b[:] = rng.normal(0, 0.1, size=m.dense_b.shape)
    return m


def sign_images(n, side=6, seed=0):
    rng = np.random.default_rng(seed)
    shift = np.where(rng.random(n) < 0.5, 0.5, -0.5)
    X = rng.normal(size=(n, side, side)) + shift[:, None, None]
    y = (X.mean(axis=(1, 2)) > 0).astype(int)
    return X, y


# --- packing -------------------------------------------------------------------

def test_pack_468_features():
    x = np.arange(1, 469, dtype=float)
    img = pack_image(x, NAMES, NAMES)
    assert img.pixels.shape == (22, 22)
    flat = img.pixels.ravel()
    assert np.all(flat[468:] == 0) and flat[468:].size == 16
    for k in (0, 21, 22, 250, 467):
        assert img.pixels[k // 22, k % 22] == x[k]
        assert img.feature_at(k // 22, k % 22) == NAMES[k]
    assert img.feature_at(21, 21) is None


def test_pack_perfect_square_and_zero():
    img = pack_image([1.0, 2.0, 3.0, 4.0], list("abcd"), list("dcba"))
    assert img.pixels.tolist() == [[4.0, 3.0], [2.0, 1.0]]
    assert not pack_image(np.zeros(5), list("abcde"), list("abcde")).pixels.any()


def test_pack_bad_order():
    with pytest.raises(ContractError):
        pack_image([1.0, 2.0], ["a", "b"], ["a", "c"])
    with pytest.raises(ContractError):
        pack_image([1.0, 2.0], ["a", "b"], ["a", "a"])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(0, 1000))
def test_pack_unpack_roundtrip(n, seed):
    rng = np.random.default_rng(seed)
    names = [f"c{i}" for i in range(n)]
    order = list(rng.permutation(names))
    x = rng.normal(size=n)
    img = pack_image(x, names, order)
    assert np.array_equal(unpack_image(img, names), x)


def test_pgm_export():
    text = to_pgm(np.array([[0.0, 1.0], [0.5, 1.0]]))
    lines = text.split()
    assert lines[0] == "P2" and lines[1:3] == ["2", "2"]


# --- forward ---------------------------------------------------------------------

def test_zero_image_zero_conv():
    m = _model(bias=False)
    m.conv_W[:] = 0.0
    tr = forward_trace(m, np.zeros((4, 4)))
    assert not tr.conv_maps.any()


def test_replay_is_bit_exact_and_inference_deterministic():
    m = _model((6, 6), 3, filters=4)
    img = np.random.default_rng(1).normal(size=(6, 6))
    tr = forward_trace(m, img)
    assert np.array_equal(tr.replay_scores(m), tr.scores)
    assert np.array_equal(forward_trace(m, img).scores, tr.scores)
    assert np.array_equal(scores_from_maps(m, tr.conv_maps), tr.scores)


def test_bias_free_linearity():
    m = _model((5, 5), 2, filters=3, bias=False)
    img = np.random.default_rng(2).normal(size=(5, 5))
    a = forward_trace(m, img).conv_pre
    b = forward_trace(m, 2 * img).conv_pre
    assert np.allclose(b, 2 * a, rtol=0, atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ContractError):
        forward_trace(_model((4, 4)), np.zeros((5, 5)))


def test_same_padding_keeps_size():
    m = _model((5, 5), 2, filters=2, padding="same")
    assert forward_trace(m, np.ones((5, 5))).conv_maps.shape == (1, 2, 5, 5)
    assert m.pool_shape == (2, 2)


def test_odd_side_pool_floor():
    m = _model((6, 6), 2, filters=2)
    assert m.conv_shape == (5, 5) and m.pool_shape == (2, 2)


# --- gradients -----------------------------------------------------------------------

def _fd_wrt_maps(m, trace, cls, h):
    num = np.zeros(trace.conv_maps.shape[1:])
    for idx in np.ndindex(num.shape):
        up, dn = trace.conv_maps.copy(), trace.conv_maps.copy()
        up[(0,) + idx] += h
        dn[(0,) + idx] -= h
        num[idx] = (scores_from_maps(m, up)[0, cls] - scores_from_maps(m, dn)[0, cls]) / (2 * h)
    return num


def test_grad_wrt_conv_tiny_net():
    m = _model((4, 4), 2, filters=1, seed=3)
    img = np.random.default_rng(3).normal(size=(4, 4))
    tr = forward_trace(m, img)
    g = grad_wrt_conv(m, tr, 1)[0]
    num = _fd_wrt_maps(m, tr, 1, 1e-4)
    assert np.linalg.norm(num - g) <= 1e-3 * max(np.linalg.norm(num), 1e-12)


def test_grad_zero_for_ignored_channel():
    m = _model((6, 6), 2, filters=3, seed=4)
    ph, pw = m.pool_shape
    m.dense_W[ph * pw:2 * ph * pw] = 0.0     # channel 1 feeds nothing
    tr = forward_trace(m, np.random.default_rng(4).normal(size=(6, 6)))
    g = grad_wrt_conv(m, tr, 0)[0]
    assert not g[1].any()


def test_grad_only_at_pool_argmax():
    m = _model((6, 6), 2, filters=2, seed=5)
    tr = forward_trace(m, np.random.default_rng(5).normal(size=(6, 6)))
    g = grad_wrt_conv(m, tr, 0)[0]
    for f in range(2):
        for i in range(m.pool_shape[0]):
            for j in range(m.pool_shape[1]):
                win = g[f, 2 * i:2 * i + 2, 2 * j:2 * j + 2].ravel()
                nz = np.flatnonzero(win)
                assert set(nz) <= {tr.pool_argmax[0, f, i, j]}
    # trailing odd row/column of the 5x5 conv map never receives gradient
    assert not g[:, 4, :].any() and not g[:, :, 4].any()


def test_pool_ties_route_to_first():
    m = _model((3, 3), 2, filters=1, bias=False)
    m.conv_W[:] = 0.0
    m.conv_b[:] = 1.0          # every conv cell equals 1: all ties
    tr = forward_trace(m, np.zeros((3, 3)))
    assert tr.pool_argmax[0, 0, 0, 0] == 0
    g = grad_wrt_conv(m, tr, 0)[0, 0]
    assert np.flatnonzero(g.ravel()).tolist() in ([0], [])


def test_invalid_class_index():
    m = _model()
    with pytest.raises(ContractError):
        grad_wrt_conv(m, forward_trace(m, np.zeros((4, 4))), 2)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["valid", "same"]), st.booleans())
def test_full_backprop_matches_finite_differences(seed, padding, use_dropout):
    rng = np.random.default_rng(seed)
    m = _model((5, 5), 3, filters=2, seed=seed, padding=padding)
    X = rng.normal(size=(3, 5, 5))
    y = rng.integers(0, 3, size=3)
    mask = (rng.random((3, m.dense_W.shape[0])) > 0.25) / 0.75 if use_dropout else None
    _, grads = loss_and_grads(m, X, y, mask)
    h = 1e-6
    num, ana = [], []
    for arr, g in zip((m.conv_W, m.conv_b, m.dense_W, m.dense_b), grads):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up, _ = loss_and_grads(m, X, y, mask)
            arr[idx] = old - h
            dn, _ = loss_and_grads(m, X, y, mask)
            arr[idx] = old
            num.append((up - dn) / (2 * h))
            ana.append(g[idx])
    num, ana = np.array(num), np.array(ana)
    assert np.linalg.norm(num - ana) <= 1e-3 * max(np.linalg.norm(num), 1e-12)


# --- training -------------------------------------------------------------------

def test_train_sign_of_mean():
    X, y = sign_images(400, seed=0)
    m = train_cnn(X[:200], y[:200], epochs=50, seed=0)
    assert np.mean(m.predict(X[200:]) == y[200:]) >= 0.95


def test_zero_epochs_valid_probabilities():
    X, y = sign_images(20, seed=1)
    a = train_cnn(X, y, epochs=0, seed=3)
    b = train_cnn(X, y, epochs=0, seed=3)
    P = a.predict_proba(X)
    assert np.allclose(P.sum(axis=1), 1.0) and np.all(P >= 0)
    assert np.array_equal(P, b.predict_proba(X))


def test_training_errors():
    X, y = sign_images(20, seed=1)
    with pytest.raises(ConfigurationError):
        train_cnn(X, y, dropout=1.0)
    with pytest.raises(DataError):
        train_cnn([np.zeros((6, 6)), np.zeros((5, 5))], [0, 1])


def test_model_json_roundtrip():
    X, y = sign_images(30, seed=2)
    m = train_cnn(X, y, epochs=2, filters=4, seed=1)
    back = ConvNetModel.from_json(json.loads(json.dumps(m.to_json())))
    assert np.array_equal(back.predict_proba(X), m.predict_proba(X))


def test_accepts_image_samples():
    m = _model((3, 3), 2, filters=1)
    img = ImageSample(np.ones((3, 3)), list("abcdefghi"))
    assert forward_trace(m, img).scores.shape == (1, 2)
