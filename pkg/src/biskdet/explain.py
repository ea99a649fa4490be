"""Class activation heatmaps (GradCAM / GradCAM++) over the finest fused feature map."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from . import numkernel as nk
from .dataio import write_pnm


@dataclass
class Heatmap:
    values: np.ndarray
    class_id: int

    def argmax(self) -> tuple[int, int]:
        """(row, col) of the hottest pixel."""
        r, c = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(r), int(c)


def gradcam_weights(activations: np.ndarray, grads: np.ndarray, mode: str = "gradcam") -> np.ndarray:
    """Per-channel weights from ``(h, w, K)`` activations and score gradients.

    ``gradcam`` averages the gradient over space. ``gradcam++`` uses the
    closed-form second-order pixel weights with ReLU'd gradients.
    """
    if mode == "gradcam":
        return grads.mean(axis=(0, 1))
    if mode == "gradcam++":
        g2, g3 = grads**2, grads**3
        denom = 2 * g2 + activations.sum(axis=(0, 1), keepdims=True) * g3
        alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0)
        return (alpha * np.maximum(grads, 0)).sum(axis=(0, 1))
    raise ValueError(f"unknown heatmap mode {mode!r}")


def weighted_activation_map(activations: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``relu(sum_k weights[k] * A[..., k])`` before any resizing or normalisation."""
    return np.maximum(np.tensordot(activations, weights, axes=([-1], [0])), 0.0)


def normalize_map(m: np.ndarray) -> np.ndarray:
    top = m.max(initial=0.0)
    return m / top if top > 0 else np.zeros_like(m)


def upsample_bilinear(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    h, w = m.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(m.astype(np.float64), [yy, xx], order=1, mode="nearest")


def class_score(logits: nk.Tensor, class_id: int) -> nk.Tensor:
    """Maximum pre-NMS softmax confidence of ``class_id`` over all anchors of image 0."""
    k = logits.shape[-1]
    probs = nk.softmax(nk.reshape(logits, (-1, k)), axis=-1)
    best = int(np.argmax(probs.data[:, class_id]))
    mask = np.zeros(probs.shape)
    mask[best, class_id] = 1.0
    return nk.tsum(nk.mul(probs, mask))


def gradcam_heatmap(model, image: np.ndarray, class_id: int, mode: str = "gradcam") -> Heatmap:
    """Heatmap for one ``(H, W, 3)`` image, taken at the detector's finest fused map."""
    if not 0 <= class_id < model.cfg.num_classes:
        raise ValueError(f"class id {class_id} out of range")
    with nk.Tape() as tape:
        out = model(image[None] if image.ndim == 3 else image)
        score = class_score(out.logits, class_id)
    nk.backward_pass(tape, score, retain=[out.features])
    model.zero_grad()
    acts = out.features.data[0]
    grads = out.features.grad[0] if out.features.grad is not None else np.zeros_like(acts)
    cam = weighted_activation_map(acts, gradcam_weights(acts, grads, mode))
    h, w = image.shape[-3:-1]
    return Heatmap(normalize_map(np.maximum(upsample_bilinear(cam, h, w), 0.0)), class_id)


def heatmap_filename(image_name: str, class_name: str) -> str:
    return f"{Path(image_name).stem}_{class_name}.pgm"


def write_heatmap_pgm(path, heatmap: Heatmap) -> None:
    write_pnm(path, np.round(heatmap.values * 255).astype(np.uint8))


def colorize(values: np.ndarray) -> np.ndarray:
    """Blue-to-red ramp for values in [0, 1]; returns float RGB."""
    v = np.clip(values, 0, 1)[..., None]
    cold, mid, hot = np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])
    lo = cold + (mid - cold) * np.clip(2 * v, 0, 1)
    return np.where(v < 0.5, lo, mid + (hot - mid) * np.clip(2 * v - 1, 0, 1))


def overlay(image: np.ndarray, heatmap: Heatmap, strength: float = 0.5) -> np.ndarray:
    """uint8 composite of an ``[0, 1]`` RGB image and the colourised heatmap."""
    mix = (1 - strength) * image + strength * colorize(heatmap.values)
    return np.clip(np.round(mix * 255), 0, 255).astype(np.uint8)


def write_overlay(path, image: np.ndarray, heatmap: Heatmap) -> None:
    """PPM or PNG by file suffix."""
    rgb = overlay(image, heatmap)
    if Path(path).suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(rgb).save(path)
    else:
        write_pnm(path, rgb)


def argmax_in_box(heatmap: Heatmap, box_center_unit) -> bool:
    """Whether the hottest pixel centre lies inside a unit center/size box."""
    h, w = heatmap.values.shape
    r, c = heatmap.argmax()
    cx, cy, bw, bh = box_center_unit
    x, y = (c + 0.5) / w, (r + 0.5) / h
    return abs(x - cx) <= bw / 2 and abs(y - cy) <= bh / 2
