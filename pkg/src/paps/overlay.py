"""Colour-coded PNG panels for predictions and ground truth."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image

from paps.fusion import AmodalPanopticPrediction


def palette(n: int, saturation: float = 0.75, value: float = 0.95) -> np.ndarray:
    """``n`` well-separated RGB colours as uint8 rows."""
    golden = 0.618033988749895
    cols = [colorsys.hsv_to_rgb((i * golden) % 1.0, saturation, value) for i in range(n)]
    return (np.array(cols).reshape(n, 3) * 255).astype(np.uint8)


def semantic_panel(semantic_map: np.ndarray, n_classes: int) -> np.ndarray:
    return palette(max(n_classes, 1), 0.5, 0.8)[np.clip(semantic_map, 0, max(n_classes - 1, 0))]


def instance_panel(masks: list[np.ndarray], shape) -> np.ndarray:
    out = np.zeros(shape + (3,), dtype=np.uint8)
    cols = palette(max(len(masks), 1))
    for k, m in enumerate(masks):
        out[m] = cols[k]
    return out


def layer_panel(masks: list[np.ndarray], layers: list[int], n_layers: int, shape) -> np.ndarray:
    """Amodal masks tinted by ordering layer; front layers are painted last."""
    out = np.zeros(shape + (3,), dtype=np.uint8)
    cols = palette(max(n_layers, 1), 0.9, 1.0)
    for k in sorted(range(len(masks)), key=lambda i: -layers[i]):
        out[masks[k]] = cols[min(layers[k], n_layers - 1)]
    return out


def prediction_panels(image: np.ndarray, pred: AmodalPanopticPrediction, n_classes: int, n_layers: int) -> list[np.ndarray]:
    shape = pred.semantic_map.shape
    rgb = (np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return [
        rgb,
        semantic_panel(pred.semantic_map, n_classes),
        instance_panel([i.inmodal_mask for i in pred.instances], shape),
        layer_panel([i.amodal_mask for i in pred.instances], [i.layer_index for i in pred.instances], n_layers, shape),
    ]


def compose(rows: list[list[np.ndarray]], zoom: int = 4, gap: int = 2) -> Image.Image:
    h, w = rows[0][0].shape[:2]
    cols = max(len(r) for r in rows)
    canvas = np.full(
        (len(rows) * (h * zoom + gap) - gap, cols * (w * zoom + gap) - gap, 3), 255, dtype=np.uint8
    )
    for r, row in enumerate(rows):
        for c, panel in enumerate(row):
            big = panel.repeat(zoom, axis=0).repeat(zoom, axis=1)
            y, x = r * (h * zoom + gap), c * (w * zoom + gap)
            canvas[y : y + h * zoom, x : x + w * zoom] = big
    return Image.fromarray(canvas)


def render_overlay(path, image, pred, n_classes: int, n_layers: int, gt=None, zoom: int = 4) -> Path:
    """Write a PNG: one row for the prediction, plus one for ground truth if given."""
    rows = [prediction_panels(image, pred, n_classes, n_layers)]
    if gt is not None:
        rows.append(prediction_panels(image, gt, n_classes, n_layers))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    compose(rows, zoom).save(path)
    return path
