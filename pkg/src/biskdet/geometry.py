"""Bounding boxes, IoU and coordinate normalisation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

CENTER = "center_size"
CORNERS = "corners"
ABSOLUTE = "absolute"
UNIT = "unit"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box.

    ``coords`` is ``(cx, cy, w, h)`` for ``center_size`` and ``(x1, y1, x2, y2)``
    for ``corners``.
    """

    coords: tuple[float, float, float, float]
    representation: str = CENTER
    space: str = UNIT

    def __post_init__(self):
        if self.representation not in (CENTER, CORNERS):
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.space not in (ABSOLUTE, UNIT):
            raise ValueError(f"unknown space {self.space!r}")
        object.__setattr__(self, "coords", tuple(float(c) for c in self.coords))
        a, b, c, d = self.coords
        if self.representation == CENTER and not (c > 0 and d > 0):
            raise ValueError(f"degenerate box {self.coords}")
        if self.representation == CORNERS and not (c > a and d > b):
            raise ValueError(f"degenerate box {self.coords}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, space: str = UNIT) -> "Box":
        return cls((x1, y1, x2, y2), CORNERS, space)

    @classmethod
    def from_center(cls, cx, cy, w, h, space: str = UNIT) -> "Box":
        return cls((cx, cy, w, h), CENTER, space)

    def corners(self) -> tuple[float, float, float, float]:
        if self.representation == CORNERS:
            return self.coords
        cx, cy, w, h = self.coords
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def center_size(self) -> tuple[float, float, float, float]:
        if self.representation == CENTER:
            return self.coords
        x1, y1, x2, y2 = self.coords
        return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        _, _, w, h = self.center_size()
        return w * h


def convert_box(b: Box, target: str) -> Box:
    if target == CENTER:
        return Box(b.center_size(), CENTER, b.space)
    if target == CORNERS:
        return Box(b.corners(), CORNERS, b.space)
    raise ValueError(f"unknown representation {target!r}")


def iou(a: Box, b: Box) -> float:
    if a.space != b.space:
        raise ValueError("boxes live in different coordinate spaces")
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def jaccard_distance(a: Box, b: Box) -> float:
    return 1.0 - iou(a, b)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner arrays ``(n, 4)`` and ``(m, 4)``."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def center_to_corners(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    half = c[..., 2:] / 2
    return np.concatenate([c[..., :2] - half, c[..., :2] + half], axis=-1)


def corners_to_center(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def normalize_box(b: Box, image_w: float, image_h: float) -> Box:
    """Divide pixel coordinates by the image extents, clamping into [0, 1]."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image extents must be positive")
    if b.space != ABSOLUTE:
        raise ValueError("normalize_box expects an absolute-pixel box")
    scale = (image_w, image_h, image_w, image_h)
    raw = [c / s for c, s in zip(b.coords, scale)]
    clamped = [min(max(v, 0.0), 1.0) for v in raw]
    if clamped != raw:
        log.info("clamped normalized box %s -> %s", raw, clamped)
    return Box(tuple(clamped), b.representation, UNIT)
