"""Detection head: anchor matching, losses, box coding and NMS decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .geometry import Box, center_to_corners, corners_to_center, iou_matrix
from .numkernel import Module, Parameter, Tensor

EPS = 1e-12
NEGATIVE = -1
IGNORED = -2


@dataclass(frozen=True)
class LossWeights:
    alpha_box: float = 1.0
    beta_reg: float = 0.0005

    def __post_init__(self):
        if not (np.isfinite(self.alpha_box) and np.isfinite(self.beta_reg)):
            raise ValueError("loss weights must be finite")
        if self.alpha_box < 0 or self.beta_reg < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class FocalParams:
    alpha_t: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha_t <= 1:
            raise ValueError("alpha_t must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float


@dataclass
class AnchorAssignment:
    """Per-anchor labels: class id (positive), NEGATIVE (-1) or IGNORED (-2)."""

    labels: np.ndarray
    matched: np.ndarray
    pos_threshold: float = 0.5
    neg_threshold: float = 0.4

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def counted(self) -> np.ndarray:
        return self.labels != IGNORED


def _corners(boxes) -> np.ndarray:
    if len(boxes) and isinstance(boxes[0], Box):
        return np.array([b.corners() for b in boxes], dtype=float)
    return np.asarray(boxes, dtype=float).reshape(-1, 4)


def assign_anchors_to_targets(
    anchors,
    gt_boxes,
    gt_classes: Sequence[int],
    pos_threshold: float = 0.5,
    neg_threshold: float = 0.4,
) -> AnchorAssignment:
    """Match anchors (corner arrays or Box lists) to ground truth by IoU.

    Positive at IoU >= pos_threshold (argmax GT, ties to the lowest index),
    negative below neg_threshold, ignored in between. Each GT also claims its
    best anchor as positive.
    """
    if pos_threshold <= neg_threshold:
        raise ValueError("positive threshold must exceed negative threshold")
    a = _corners(anchors)
    if len(a) == 0:
        raise ValueError("no anchors")
    labels = np.full(len(a), NEGATIVE, dtype=int)
    matched = np.full(len(a), -1, dtype=int)
    if len(gt_boxes) == 0:
        return AnchorAssignment(labels, matched, pos_threshold, neg_threshold)
    g = _corners(gt_boxes)
    cls = np.asarray(gt_classes, dtype=int)
    ious = iou_matrix(a, g)
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(len(a)), best_gt]
    labels[(best_iou >= neg_threshold) & (best_iou < pos_threshold)] = IGNORED
    pos = best_iou >= pos_threshold
    labels[pos] = cls[best_gt[pos]]
    matched[pos] = best_gt[pos]
    claimed: dict[int, int] = {}
    for j in range(len(g)):
        i = int(np.argmax(ious[:, j]))
        if ious[i, j] <= 0:
            continue
        if i in claimed and ious[i, claimed[i]] >= ious[i, j]:
            continue
        claimed[i] = j
    for i, j in claimed.items():
        labels[i] = cls[j]
        matched[i] = j
    return AnchorAssignment(labels, matched, pos_threshold, neg_threshold)


# --------------------------------------------------------------------------
# losses


def _mask_mean(values: Tensor, mask) -> Tensor:
    if mask is None:
        return nk.tmean(values)
    mask = np.asarray(mask, dtype=float)
    n = mask.sum()
    if n == 0:
        return Tensor(0.0)
    return nk.tsum(nk.mul(values, mask)) / n


def loss_classification_ce(predictions: Tensor, targets: np.ndarray, mask=None) -> Tensor:
    """Mean over counted anchors of -sum_c y log(y_hat); rows of y_hat must sum to 1."""
    predictions = predictions if isinstance(predictions, Tensor) else Tensor(predictions)
    rows = predictions.data.sum(axis=-1)
    if np.any(np.abs(rows - 1.0) > 1e-6):
        raise ValueError("prediction rows must sum to 1")
    per_anchor = -nk.tsum(nk.mul(nk.log(predictions, EPS), np.asarray(targets, float)), axis=-1)
    return _mask_mean(per_anchor, mask)


def loss_focal(p_t: Tensor, params: FocalParams = FocalParams(), mask=None) -> Tensor:
    """Mean of -alpha_t (1 - p_t)^gamma log(p_t); p_t is clamped below at 1e-12."""
    p_t = p_t if isinstance(p_t, Tensor) else Tensor(p_t)
    if np.any(p_t.data > 1 + 1e-9) or np.any(p_t.data < 0):
        raise ValueError("p_t must lie in [0, 1]")
    modulator = nk.power(nk.add(1.0, nk.neg(p_t)), params.gamma) if params.gamma else Tensor(1.0)
    per_anchor = nk.mul(nk.mul(modulator, nk.log(p_t, EPS)), -params.alpha_t)
    return _mask_mean(per_anchor, mask)


def loss_box_smooth_l1(t, t_hat: Tensor, mask=None) -> Tensor:
    """Mean over positive anchors of the summed smooth-L1 over (x, y, w, h)."""
    t_hat = t_hat if isinstance(t_hat, Tensor) else Tensor(t_hat)
    diff = nk.add(Tensor(np.asarray(t, float)), nk.neg(t_hat))
    if mask is not None:
        m = np.asarray(mask, dtype=float)
        diff = nk.mul(diff, m[..., None])
        n = m.sum()
    else:
        n = int(np.prod(diff.shape[:-1]))
    if n == 0:
        return Tensor(0.0)
    return nk.tsum(nk.smooth_l1(diff)) / n


def regularized_parameters(params: Sequence[Parameter]) -> list[Parameter]:
    """Weights subject to L2: everything except swish beta."""
    return [p for p in params if not (p.name or "").endswith("beta")]


def loss_regularization(params: Sequence[Parameter]) -> Tensor:
    """sum ||w||^2 divided by the number of weights."""
    ws = regularized_parameters(params)
    count = sum(p.data.size for p in ws)
    if count == 0:
        return Tensor(0.0)
    total = Tensor(0.0)
    for p in ws:
        total = nk.add(total, nk.tsum(nk.power(p, 2)))
    return total / count


def loss_total(l_cls, l_box, params: Sequence[Parameter], weights: LossWeights = LossWeights()) -> Tensor:
    """L = L_cls + alpha_box * L_box + beta_reg * L_reg."""
    l_reg = loss_regularization(params)
    return nk.add(nk.add(l_cls, nk.mul(l_box, weights.alpha_box)), nk.mul(l_reg, weights.beta_reg))


# --------------------------------------------------------------------------
# anchors and box coding


def generate_anchors(grid_h: int, grid_w: int, shapes_px, image_h: int, image_w: int) -> np.ndarray:
    """Unit-space center/size anchors, ordered (row, col, shape)."""
    shapes = np.asarray(shapes_px, dtype=float).reshape(-1, 2)
    cy = (np.arange(grid_h) + 0.5) / grid_h
    cx = (np.arange(grid_w) + 0.5) / grid_w
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    out = np.empty((grid_h, grid_w, len(shapes), 4))
    out[..., 0] = xx[..., None]
    out[..., 1] = yy[..., None]
    out[..., 2] = shapes[:, 0] / image_w
    out[..., 3] = shapes[:, 1] / image_h
    return out.reshape(-1, 4)


@dataclass(frozen=True)
class BoxCoder:
    """Additive center/size offsets in unit space, expressed in units of ``scale``."""

    scale: float = 0.1

    def encode(self, gt_center: np.ndarray, anchor_center: np.ndarray) -> np.ndarray:
        return (np.asarray(gt_center) - np.asarray(anchor_center)) / self.scale

    def decode(self, offsets: np.ndarray, anchor_center: np.ndarray) -> np.ndarray:
        return np.asarray(anchor_center) + self.scale * np.asarray(offsets)


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> list[int]:
    """Greedy suppression over corner boxes; returns kept indices by descending score."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while len(order):
        i = order[0]
        keep.append(int(i))
        if len(order) == 1:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = rest[ious <= threshold]
    return keep


def decode_and_nms(
    class_probs: np.ndarray,
    offsets: np.ndarray,
    anchors: np.ndarray,
    conf_threshold: float = 0.25,
    nms_threshold: float = 0.5,
    coder: BoxCoder = BoxCoder(),
    background: bool = True,
    max_detections: int = 100,
) -> list[Detection]:
    """Turn per-anchor class probabilities and offsets into NMS-filtered detections.

    ``class_probs`` is ``(A, C)`` or ``(A, C + 1)`` with background last when
    ``background`` is set.
    """
    probs = np.asarray(class_probs, dtype=float)
    if background:
        probs = probs[:, :-1]
    centers = coder.decode(offsets, anchors)
    centers[:, 2:] = np.maximum(centers[:, 2:], 1e-6)
    corners = np.clip(center_to_corners(centers), 0.0, 1.0)
    valid = (corners[:, 2] > corners[:, 0]) & (corners[:, 3] > corners[:, 1])
    dets: list[tuple[float, int, np.ndarray]] = []
    for c in range(probs.shape[1]):
        idx = np.nonzero((probs[:, c] >= conf_threshold) & valid)[0]
        if len(idx) == 0:
            continue
        kept = nms(corners[idx], probs[idx, c], nms_threshold)
        dets.extend((float(probs[idx[k], c]), c, corners[idx[k]]) for k in kept)
    dets.sort(key=lambda d: -d[0])
    return [
        Detection(Box.from_corners(*box), cls, min(max(score, 0.0), 1.0))
        for score, cls, box in dets[:max_detections]
    ]


# --------------------------------------------------------------------------
# head network


class DetectionHead(Module):
    """Shared separable trunk, then class logits (C + background) and box offsets per anchor."""

    def __init__(self, in_channels: int, num_anchors: int, num_classes: int, seed: int = 2, depth: int = 2,
                 prior: float = 0.01):
        rng = np.random.default_rng(seed)
        self.num_anchors = num_anchors
        self.num_classes = num_classes
        c = in_channels
        self.dw = [Parameter(nk.he_normal((3, 3, c), 9, rng), f"trunk{i}.dw") for i in range(depth)]
        self.pw = [Parameter(nk.he_normal((1, 1, c, c), c, rng), f"trunk{i}.pw") for i in range(depth)]
        self.pb = [Parameter(np.zeros(c), f"trunk{i}.bias") for i in range(depth)]
        self.beta = [Parameter(np.ones(1), f"trunk{i}.beta") for i in range(depth)]
        k = num_classes + 1
        self.cls_w = Parameter(rng.normal(0, 0.01, (1, 1, c, num_anchors * k)), "cls.w")
        bias = np.zeros((num_anchors, k))
        bias[:, -1] = np.log(num_classes * (1 - prior) / prior)
        self.cls_b = Parameter(bias.reshape(-1), "cls.bias")
        self.box_w = Parameter(rng.normal(0, 0.01, (1, 1, c, num_anchors * 4)), "box.w")
        self.box_b = Parameter(np.zeros(num_anchors * 4), "box.bias")

    def __call__(self, fmap: Tensor) -> tuple[Tensor, Tensor]:
        x = fmap
        for dw, pw, pb, beta in zip(self.dw, self.pw, self.pb, self.beta):
            x = nk.depthwise_conv2d(x, dw, padding="same")
            x = nk.swish(nk.add(nk.pointwise_conv2d(x, pw), pb), beta)
        n = x.shape[0] if x.data.ndim == 4 else 1
        logits = nk.add(nk.pointwise_conv2d(x, self.cls_w), self.cls_b)
        boxes = nk.add(nk.pointwise_conv2d(x, self.box_w), self.box_b)
        return (
            nk.reshape(logits, (n, -1, self.num_classes + 1)),
            nk.reshape(boxes, (n, -1, 4)),
        )
