"""Feature-image packing and a single-conv-layer CNN with a hand-written backward pass.

Architecture: conv (F filters, kh x kw, stride 1) -> ReLU -> 2x2 max pool
(trailing odd row/column dropped) -> dropout -> dense softmax.

With ``padding="same"`` the input is zero padded on the bottom/right by
``kh - 1`` rows and ``kw - 1`` columns so the conv maps keep the input size;
``"valid"`` uses only full windows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DataError
from .models.mlp import softmax

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    source_feature_order: list[str]
    label: int | None = None

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    def feature_at(self, row: int, col: int) -> str | None:
        k = row * self.pixels.shape[1] + col
        return self.source_feature_order[k] if k < len(self.source_feature_order) else None


def pack_image(x, feature_names, importance_order, label=None) -> ImageSample:
    """Lay ``x`` out row-major in ``importance_order`` on a ceil(sqrt(n)) square grid.

    Cells past the n-th are zero padding.
    """
    x = np.asarray(x, dtype=float)
    feature_names = list(feature_names)
    order = list(importance_order)
    if x.shape != (len(feature_names),):
        raise ContractError(f"x has shape {x.shape}, expected ({len(feature_names)},)")
    if sorted(order) != sorted(feature_names) or len(set(order)) != len(order):
        raise ContractError("importance_order must be a permutation of the feature names")
    n = len(order)
    side = math.isqrt(n)
    if side * side < n:
        side += 1
    position = {name: i for i, name in enumerate(feature_names)}
    flat = np.zeros(side * side)
    flat[:n] = x[[position[name] for name in order]]
    return ImageSample(flat.reshape(side, side), order, label)


def unpack_image(img: ImageSample, feature_names) -> np.ndarray:
    flat = img.pixels.ravel()
    value = dict(zip(img.source_feature_order, flat))
    return np.array([value[name] for name in feature_names])


def to_pgm(grid) -> str:
    """Plain (P2) PGM text, min-max scaled to 0..255."""
    grid = np.asarray(grid, dtype=float)
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros_like(grid) if hi <= lo else (grid - lo) / (hi - lo) * 255.0
    rows = [" ".join(str(int(round(v))) for v in row) for row in scaled]
    return f"P2\n{grid.shape[1]} {grid.shape[0]}\n255\n" + "\n".join(rows) + "\n"


@dataclass
class ConvNetModel:
    conv_W: np.ndarray        # (filters, kh, kw)
    conv_b: np.ndarray        # (filters,)
    dense_W: np.ndarray       # (filters * ph * pw, classes)
    dense_b: np.ndarray       # (classes,)
    input_shape: tuple[int, int]
    dropout: float = 0.25
    seed: int = 0
    padding: str = "valid"

    @property
    def filters(self) -> int:
        return self.conv_W.shape[0]

    @property
    def class_count(self) -> int:
        return self.dense_b.shape[0]

    @property
    def conv_shape(self) -> tuple[int, int]:
        if self.padding == "same":
            return tuple(self.input_shape)
        kh, kw = self.conv_W.shape[1:]
        return self.input_shape[0] - kh + 1, self.input_shape[1] - kw + 1

    @property
    def pool_shape(self) -> tuple[int, int]:
        h, w = self.conv_shape
        return h // 2, w // 2

    def predict_proba(self, images) -> np.ndarray:
        return softmax(forward_trace(self, images).scores)

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.predict_proba(images), axis=-1)

    def to_json(self) -> dict:
        def arr(a):
            return {"shape": list(a.shape), "data": a.ravel().tolist()}
        return {"format_version": FORMAT_VERSION, "input_shape": list(self.input_shape),
                "dropout": self.dropout, "seed": self.seed, "padding": self.padding,
                "conv_W": arr(self.conv_W), "conv_b": arr(self.conv_b),
                "dense_W": arr(self.dense_W), "dense_b": arr(self.dense_b)}

    @classmethod
    def from_json(cls, doc: dict) -> "ConvNetModel":
        def arr(d):
            return np.asarray(d["data"], dtype=float).reshape(d["shape"])
        return cls(arr(doc["conv_W"]), arr(doc["conv_b"]), arr(doc["dense_W"]),
                   arr(doc["dense_b"]), tuple(doc["input_shape"]), doc["dropout"], doc["seed"],
                   doc.get("padding", "valid"))


@dataclass
class ForwardTrace:
    """Cached activations of one forward pass over a batch.

    ``conv_pre`` is the conv output before ReLU and ``conv_maps`` after it;
    ``conv_maps`` is the last-conv activation used by Grad-CAM.
    """

    images: np.ndarray
    patches: np.ndarray
    conv_pre: np.ndarray      # (N, F, H', W')
    conv_maps: np.ndarray     # (N, F, H', W')
    pool_argmax: np.ndarray   # (N, F, ph, pw) in 0..3, row-major within the window
    pooled: np.ndarray        # (N, F, ph, pw)
    dense_in: np.ndarray      # (N, F*ph*pw), after dropout if any
    scores: np.ndarray        # (N, C)
    dropout_mask: np.ndarray | None = field(default=None)

    def replay_scores(self, model: ConvNetModel) -> np.ndarray:
        return self.dense_in @ model.dense_W + model.dense_b


def _as_batch(model: ConvNetModel, images) -> tuple[np.ndarray, bool]:
    if isinstance(images, ImageSample):
        images = images.pixels
    elif isinstance(images, (list, tuple)) and images and isinstance(images[0], ImageSample):
        images = np.stack([im.pixels for im in images])
    X = np.asarray(images, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != tuple(model.input_shape):
        raise ContractError(f"expected images of shape {tuple(model.input_shape)}, got {X.shape}")
    return X, single


def _max_pool(maps: np.ndarray):
    """2x2 max pool dropping a trailing odd row/column; ties go to the first cell."""
    n, f, h, w = maps.shape
    ph, pw = h // 2, w // 2
    windows = (maps[:, :, :2 * ph, :2 * pw].reshape(n, f, ph, 2, pw, 2)
               .transpose(0, 1, 2, 4, 3, 5).reshape(n, f, ph, pw, 4))
    arg = np.argmax(windows, axis=-1)
    return arg, np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]


def scores_from_maps(model: ConvNetModel, maps, dropout_mask=None) -> np.ndarray:
    """Class scores computed from given last-conv activations ``(N, F, H', W')``."""
    _, pooled = _max_pool(np.asarray(maps, dtype=float))
    dense_in = pooled.reshape(pooled.shape[0], -1)
    if dropout_mask is not None:
        dense_in = dense_in * dropout_mask
    return dense_in @ model.dense_W + model.dense_b


def forward_trace(model: ConvNetModel, images, dropout_mask=None) -> ForwardTrace:
    """Inference-mode forward pass unless an explicit ``dropout_mask`` is given."""
    X, _ = _as_batch(model, images)
    kh, kw = model.conv_W.shape[1:]
    if model.padding == "same":
        X = np.pad(X, ((0, 0), (0, kh - 1), (0, kw - 1)))
    patches = sliding_window_view(X, (kh, kw), axis=(1, 2))          # (N, H', W', kh, kw)
    pre = np.einsum("nhwij,fij->nfhw", patches, model.conv_W) + model.conv_b[None, :, None, None]
    maps = np.maximum(pre, 0.0)

    arg, pooled = _max_pool(maps)
    dense_in = pooled.reshape(maps.shape[0], -1)
    if dropout_mask is not None:
        dense_in = dense_in * dropout_mask
    scores = dense_in @ model.dense_W + model.dense_b
    return ForwardTrace(X, patches, pre, maps, arg, pooled, dense_in, scores, dropout_mask)


def _unpool(model: ConvNetModel, trace: ForwardTrace, d_pooled: np.ndarray) -> np.ndarray:
    """Route pooled gradients to each window's (first) argmax cell."""
    n, f, ph, pw = d_pooled.shape
    onehot = np.eye(4)[trace.pool_argmax] * d_pooled[..., None]       # (n,f,ph,pw,4)
    block = onehot.reshape(n, f, ph, pw, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, f, 2 * ph, 2 * pw)
    h, w = model.conv_shape
    out = np.zeros((n, f, h, w))
    out[:, :, :2 * ph, :2 * pw] = block
    return out


def grad_wrt_conv(model: ConvNetModel, trace: ForwardTrace, class_index: int) -> np.ndarray:
    """d(class score) / d(last-conv activation) for every traced image, shape (N, F, H', W')."""
    if not 0 <= class_index < model.class_count:
        raise ContractError(f"class_index {class_index} out of range [0, {model.class_count})")
    n = trace.conv_maps.shape[0]
    d_dense = np.broadcast_to(model.dense_W[:, class_index], (n, model.dense_W.shape[0]))
    if trace.dropout_mask is not None:
        d_dense = d_dense * trace.dropout_mask
    d_pooled = d_dense.reshape(trace.pooled.shape)
    return _unpool(model, trace, d_pooled)


def loss_and_grads(model: ConvNetModel, images, labels, dropout_mask=None):
    """Mean softmax cross-entropy and gradients for (conv_W, conv_b, dense_W, dense_b)."""
    trace = forward_trace(model, images, dropout_mask)
    labels = np.asarray(labels)
    n = labels.size
    p = softmax(trace.scores)
    loss = -float(np.mean(np.log(np.clip(p[np.arange(n), labels], 1e-300, None))))
    d_scores = p
    d_scores[np.arange(n), labels] -= 1.0
    d_scores /= n
    g_dense_W = trace.dense_in.T @ d_scores
    g_dense_b = d_scores.sum(axis=0)
    d_dense_in = d_scores @ model.dense_W.T
    if dropout_mask is not None:
        d_dense_in = d_dense_in * dropout_mask
    d_maps = _unpool(model, trace, d_dense_in.reshape(trace.pooled.shape))
    d_pre = d_maps * (trace.conv_pre > 0)
    g_conv_W = np.einsum("nfhw,nhwij->fij", d_pre, trace.patches)
    g_conv_b = d_pre.sum(axis=(0, 2, 3))
    return loss, (g_conv_W, g_conv_b, g_dense_W, g_dense_b)


def init_model(input_shape, n_classes, *, filters=32, kernel=(2, 2), dropout=0.25, seed=0,
               padding="valid"):
    if padding not in ("same", "valid"):
        raise ConfigurationError(f"padding must be 'same' or 'valid', got {padding!r}")
    rng = np.random.default_rng(seed)
    kh, kw = kernel
    h, w = input_shape[0], input_shape[1]
    if padding == "valid":
        h, w = h - kh + 1, w - kw + 1
    if h < 2 or w < 2:
        raise ConfigurationError(f"input {tuple(input_shape)} too small for a {kernel} conv + 2x2 pool")
    fan_dense = filters * (h // 2) * (w // 2)
    return ConvNetModel(
        conv_W=rng.normal(0.0, math.sqrt(2.0 / (kh * kw)), size=(filters, kh, kw)),
        conv_b=np.zeros(filters),
        dense_W=rng.normal(0.0, math.sqrt(1.0 / fan_dense), size=(fan_dense, n_classes)),
        dense_b=np.zeros(n_classes),
        input_shape=(int(input_shape[0]), int(input_shape[1])),
        dropout=dropout, seed=seed, padding=padding)


def train_cnn(images, labels, *, filters=32, kernel=(2, 2), dropout=0.25, epochs=30,
              lr=0.05, batch_size=32, seed=0, n_classes=None, padding="valid") -> ConvNetModel:
    """Mini-batch gradient descent on softmax cross-entropy; dropout only while training."""
    if isinstance(images, (list, tuple)) and images and isinstance(images[0], ImageSample):
        images = [im.pixels for im in images]
    shapes = {np.shape(im) for im in images}
    if len(shapes) != 1:
        raise DataError(f"images have inconsistent shapes: {sorted(shapes)}")
    X = np.asarray(images, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= dropout < 1.0:
        raise ConfigurationError(f"dropout must be in [0, 1), got {dropout}")
    if epochs < 0 or filters < 1 or lr <= 0 or batch_size < 1:
        raise ConfigurationError("epochs >= 0, filters >= 1, lr > 0 and batch_size >= 1 required")
    C = int(n_classes or (y.max() + 1))
    if np.unique(y).size < 2:
        raise DataError("training images contain a single class")

    model = init_model(X.shape[1:], C, filters=filters, kernel=kernel, dropout=dropout, seed=seed,
                       padding=padding)
    rng = np.random.default_rng([seed, 1])
    n = X.shape[0]
    params = [model.conv_W, model.conv_b, model.dense_W, model.dense_b]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            mask = None
            if dropout > 0:
                mask = (rng.random((rows.size, model.dense_W.shape[0])) >= dropout) / (1.0 - dropout)
            _, grads = loss_and_grads(model, X[rows], y[rows], mask)
            for p, g in zip(params, grads):
                p -= lr * g
    return model
