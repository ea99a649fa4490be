"""Anchor aspect-ratio / scale search: Jaccard k-means, template snapping, scale merging."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_TEMPLATES = (32, 64, 128, 256, 512)


@dataclass(frozen=True)
class AnchorShape:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"anchor shape must be positive, got {self.width}x{self.height}")


@dataclass
class AnchorConfig:
    aspect_ratios: list[float]
    scales: list[float]
    templates: list[int] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    merge_threshold: float = 1.25
    centroids: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.templates, self.templates[1:])):
            raise ValueError("templates must be strictly increasing")
        if any(b < a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be sorted")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AnchorConfig":
        raw = json.loads(text)
        raw["centroids"] = [tuple(c) for c in raw.get("centroids", [])]
        return cls(**raw)

    def shapes(self, template: float) -> list[tuple[float, float]]:
        """Anchor (w, h) pairs for one template size: every scale x every aspect ratio.

        The longer side equals ``scale * template``; height/width equals the ratio.
        """
        out = []
        for s in self.scales:
            side = s * template
            for a in self.aspect_ratios:
                out.append((side / a, side) if a >= 1 else (side, side * a))
        return out


def shape_iou(wh: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of co-centred shapes, ``(n, 2)`` x ``(k, 2)`` -> ``(n, k)``."""
    inter = np.minimum(wh[:, None, 0], centroids[None, :, 0]) * np.minimum(
        wh[:, None, 1], centroids[None, :, 1]
    )
    union = (wh[:, 0] * wh[:, 1])[:, None] + (centroids[:, 0] * centroids[:, 1])[None, :] - inter
    return inter / union


def clustering_objective(wh: np.ndarray, centroids: np.ndarray) -> float:
    """Total Jaccard distance of each shape to its nearest centroid."""
    return float(np.sum(np.min(1.0 - shape_iou(wh, centroids), axis=1)))


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        wh = boxes.astype(float).reshape(-1, 2)
    else:
        wh = np.array([[b.width, b.height] for b in boxes], dtype=float).reshape(-1, 2)
    if wh.size and np.any(wh <= 0):
        raise ValueError("all shapes must have positive width and height")
    return wh


def jaccard_center(wh: np.ndarray, max_candidates: int = 64) -> np.ndarray:
    """Shape minimising the summed co-centred Jaccard distance to ``wh``.

    The search runs over the grid of member widths x member heights, where the
    minimiser sits (checked against continuous optimisation in the tests).
    Groups with more distinct sides than ``max_candidates`` search a
    quantile-thinned grid instead.
    """
    ws, hs = np.unique(wh[:, 0]), np.unique(wh[:, 1])
    if len(ws) > max_candidates:
        ws = np.unique(np.quantile(ws, np.linspace(0, 1, max_candidates), method="nearest"))
    if len(hs) > max_candidates:
        hs = np.unique(np.quantile(hs, np.linspace(0, 1, max_candidates), method="nearest"))
    grid = np.stack(np.meshgrid(ws, hs, indexing="ij"), axis=-1).reshape(-1, 2)
    costs = np.sum(1.0 - shape_iou(wh, grid), axis=0)
    return grid[int(np.argmin(costs))]


_REDUCERS = {
    "jaccard": lambda m: jaccard_center(m),
    "median": lambda m: np.median(m, axis=0),
    "mean": lambda m: np.mean(m, axis=0),
}


def _seed(wh, k, rng):
    """Farthest-point seeding: D^2-weighted draws under Jaccard distance."""
    picks = [int(rng.integers(len(wh)))]
    for _ in range(1, k):
        d = np.min(1.0 - shape_iou(wh, wh[picks]), axis=1) ** 2
        if d.sum() <= 0:
            picks.append(int(rng.integers(len(wh))))
        else:
            picks.append(int(rng.choice(len(wh), p=d / d.sum())))
    return wh[picks].copy()


def _lloyd(wh, cents, reducer, max_iter):
    labels = None
    for _ in range(max_iter):
        new = np.argmin(1.0 - shape_iou(wh, cents), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(cents)):
            members = wh[labels == j]
            if len(members):
                cents[j] = reducer(members)
    return cents


def cluster_anchor_shapes(
    boxes: Sequence[AnchorShape] | np.ndarray,
    k: int,
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 100,
    centroid: str = "jaccard",
) -> list[AnchorShape]:
    """K-means over box shapes with ``1 - IoU`` as the distance.

    Each restart seeds by farthest-point draws and runs Lloyd iterations until
    the assignment is stable (or ``max_iter``). The restart with the lowest
    objective wins, ties going to the earliest. ``centroid`` picks the update
    rule: ``"jaccard"`` (exact distance minimiser), ``"median"`` or ``"mean"``.
    Centroids come back sorted by area.
    """
    wh = _as_array(boxes)
    if len(wh) == 0:
        raise ValueError("no boxes to cluster")
    if not 1 <= k <= len(wh):
        raise ValueError(f"k={k} must lie in [1, {len(wh)}]")
    reducer = _REDUCERS[centroid]
    best_obj, best = np.inf, None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        cents = _lloyd(wh, _seed(wh, k, rng), reducer, max_iter)
        obj = clustering_objective(wh, cents)
        if obj < best_obj:
            best_obj, best = obj, cents
    order = np.argsort(best[:, 0] * best[:, 1], kind="stable")
    return [AnchorShape(float(w), float(h)) for w, h in best[order]]


def merge_scales(scales: Sequence[float], merge_threshold: float = 1.25) -> list[float]:
    """Collapse runs of near-equal sorted scales into their mean.

    A run starts at a base value and absorbs followers while
    ``follower / base < merge_threshold``. The sweep repeats on the merged
    values (member-weighted) until nothing changes, so every consecutive pair
    in the output is at least ``merge_threshold`` apart.
    """
    scales = [float(s) for s in scales]
    if any(b < a for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be sorted increasing")
    if merge_threshold <= 1:
        raise ValueError("merge_threshold must exceed 1")
    groups = [[s] for s in scales]
    while True:
        merged, j = [], 0
        while j < len(groups):
            base = np.mean(groups[j])
            q = j + 1
            while q < len(groups) and np.mean(groups[q]) / base < merge_threshold:
                q += 1
            merged.append([s for g in groups[j:q] for s in g])
            j = q
        if len(merged) == len(groups):
            break
        groups = merged
    return [float(np.mean(g)) for g in groups]


def nearest_template(size: float, templates: Sequence[float]) -> float:
    """argmin |template - size|; ties resolve to the smaller template."""
    return min(templates, key=lambda t: (abs(t - size), t))


def compute_anchor_hyperparameters(
    boxes: Sequence[AnchorShape] | np.ndarray,
    k: int,
    templates: Sequence[int] = DEFAULT_TEMPLATES,
    merge_threshold: float = 1.25,
    seed: int = 0,
    **cluster_kw,
) -> AnchorConfig:
    cents = cluster_anchor_shapes(boxes, k, seed=seed, **cluster_kw)
    aspects = [c.height / c.width for c in cents]
    raw_scales = []
    for c in cents:
        s = max(c.width, c.height)
        raw_scales.append(s / nearest_template(s, templates))
    return AnchorConfig(
        aspect_ratios=aspects,
        scales=merge_scales(sorted(raw_scales), merge_threshold),
        templates=list(templates),
        merge_threshold=merge_threshold,
        centroids=[(c.width, c.height) for c in cents],
    )
