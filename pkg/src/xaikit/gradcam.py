"""Grad-CAM heatmaps over packed feature images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convnet import ConvNetModel, ImageSample, forward_trace, grad_wrt_conv


@dataclass
class Heatmap:
    """``grid`` is at input resolution; ``cam`` at conv-map resolution."""

    grid: np.ndarray
    cam: np.ndarray
    class_index: int
    channel_weights: np.ndarray
    image_id: object = None
    feature_order: list[str] | None = None

    def feature_at(self, row: int, col: int) -> str | None:
        if self.feature_order is None:
            return None
        k = row * self.grid.shape[1] + col
        return self.feature_order[k] if k < len(self.feature_order) else None

    def top_cells(self, k: int = 10) -> list[dict]:
        flat = self.grid.ravel()
        order = sorted(range(flat.size), key=lambda c: (-flat[c], c))[:k]
        w = self.grid.shape[1]
        return [{"row": c // w, "col": c % w, "feature": self.feature_at(c // w, c % w),
                 "value": float(flat[c])} for c in order]

    def to_json(self, top: int = 10) -> dict:
        return {"kind": "heatmap", "grid": self.grid.tolist(), "class": self.class_index,
                "image_id": self.image_id, "channel_weights": self.channel_weights.tolist(),
                "top_cells": self.top_cells(top)}


def upsample_nearest(grid: np.ndarray, shape) -> np.ndarray:
    h, w = grid.shape
    H, W = shape
    rows = np.minimum((np.arange(H) * h) // H, h - 1)
    cols = np.minimum((np.arange(W) * w) // W, w - 1)
    return grid[np.ix_(rows, cols)]


def gradcam_heatmap(model: ConvNetModel, img, class_index: int, image_id=None) -> Heatmap:
    """Gradient-weighted class activation map for one image.

    Channel weights are spatial means of d(score)/d(activation); the map is
    ``ReLU(sum_c weight_c * A_c)`` scaled to max 1 (an all-zero map stays
    zero) and upsampled to the input size by nearest neighbour.
    """
    trace = forward_trace(model, img)
    grads = grad_wrt_conv(model, trace, class_index)[0]       # (F, H', W')
    maps = trace.conv_maps[0]
    weights = grads.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, maps, axes=1), 0.0)
    peak = raw.max()
    cam = raw / peak if peak > 0 else np.zeros_like(raw)
    grid = upsample_nearest(cam, model.input_shape)
    order = img.source_feature_order if isinstance(img, ImageSample) else None
    return Heatmap(grid, cam, int(class_index), weights, image_id, order)
