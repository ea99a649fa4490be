"""Detection metrics: confusion matrix, rate table, all-points AP / mAP, k-fold summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import center_to_corners, iou_matrix
from .head import Detection

UNDEFINED = None  # rate with a zero denominator


def _gt_corners(boxes) -> np.ndarray:
    return center_to_corners(np.asarray(boxes, dtype=float).reshape(-1, 4))


def _det_corners(dets: Sequence[Detection]) -> np.ndarray:
    return np.array([d.box.corners() for d in dets], dtype=float).reshape(-1, 4)


# --------------------------------------------------------------------------
# confusion matrix


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth classes, columns predicted classes; index C is background."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0] - 1

    def per_class(self, c: int) -> dict[str, int]:
        """One-vs-rest TP / FP / FN / TN counts for class ``c``."""
        m = self.counts
        tp = int(m[c, c])
        fp = int(m[:, c].sum() - tp)
        fn = int(m[c, :].sum() - tp)
        tn = int(m.sum() - tp - fp - fn)
        return {"tp": tp, "fp": fp, "fn": fn, "tn": tn}


def confusion_matrix(preds: Sequence[Sequence[Detection]], gt_boxes, gt_classes, num_classes: int,
                     iou_threshold: float = 0.5) -> ConfusionMatrix:
    """Class-agnostic greedy matching per image in descending confidence order."""
    m = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    bg = num_classes
    for dets, boxes, classes in zip(preds, gt_boxes, gt_classes):
        classes = np.asarray(classes, dtype=int)
        order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
        dets = [dets[i] for i in order]
        taken = np.zeros(len(classes), dtype=bool)
        ious = iou_matrix(_det_corners(dets), _gt_corners(boxes)) if len(dets) and len(classes) else None
        for i, d in enumerate(dets):
            j = -1
            if ious is not None:
                cand = np.where(taken, -1.0, ious[i])
                j = int(np.argmax(cand))
                if cand[j] < iou_threshold:
                    j = -1
            if j >= 0:
                taken[j] = True
                m[classes[j], d.class_id] += 1
            else:
                m[bg, d.class_id] += 1
        for j in np.nonzero(~taken)[0]:
            m[classes[j], bg] += 1
    return ConfusionMatrix(m)


# --------------------------------------------------------------------------
# rates


def _ratio(num: float, den: float):
    return UNDEFINED if den == 0 else num / den


def detection_rates(tp: int, fp: int, tn: int, fn: int, recall_style_precision: bool = False) -> dict:
    """TPR, FPR, TNR, FNR, precision and recall; zero denominators give ``UNDEFINED``.

    ``recall_style_precision`` switches precision to TP / (TP + FN), the recall-shaped variant some reports use.
    """
    if min(tp, fp, tn, fn) < 0:
        raise ValueError("counts must be nonnegative")
    tpr = _ratio(tp, tp + fn)
    return {
        "TPR": tpr,
        "FPR": _ratio(fp, fp + tn),
        "TNR": _ratio(tn, fp + tn),
        "FNR": _ratio(fn, tp + fn),
        "precision": _ratio(tp, tp + fn) if recall_style_precision else _ratio(tp, tp + fp),
        "recall": tpr,
    }


# --------------------------------------------------------------------------
# average precision


@dataclass
class APResult:
    per_class: list[float]
    map: float
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    gt_counts: list[int] = field(default_factory=list)


def _match_class(dets, gt_boxes, gt_classes, c: int, iou_threshold: float):
    """Confidence-ordered greedy matching for one class; returns (confidences, is_tp, n_gt)."""
    items = []
    for img, ds in enumerate(dets):
        for d in ds:
            if d.class_id == c:
                items.append((d.confidence, img, d))
    items.sort(key=lambda t: -t[0])  # stable: ties keep input order
    gts = {}
    n_gt = 0
    for img, (boxes, classes) in enumerate(zip(gt_boxes, gt_classes)):
        sel = np.asarray(classes, dtype=int) == c
        corners = _gt_corners(boxes)[sel]
        gts[img] = (corners, np.zeros(len(corners), dtype=bool))
        n_gt += len(corners)
    conf = np.array([t[0] for t in items], dtype=float)
    tp = np.zeros(len(items), dtype=bool)
    for k, (_, img, d) in enumerate(items):
        corners, taken = gts[img]
        if not len(corners):
            continue
        ious = np.where(taken, -1.0, iou_matrix(np.array([d.box.corners()]), corners)[0])
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            taken[j] = True
            tp[k] = True
    return conf, tp, n_gt


def _all_points_ap(conf: np.ndarray, tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Area under the monotone precision envelope, with PR points at distinct confidence cutoffs."""
    if n_gt == 0:
        return math.nan, np.zeros(0), np.zeros(0)
    if len(conf) == 0:
        return 0.0, np.zeros(1), np.ones(1)
    ctp = np.cumsum(tp)
    cut = np.nonzero(np.r_[conf[1:] != conf[:-1], True])[0]  # last index of each tied group
    recall = ctp[cut] / n_gt
    precision = ctp[cut] / (cut + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * env))
    return ap, recall, precision


def average_precision_map(detections: Sequence[Sequence[Detection]], gt_boxes, gt_classes,
                          num_classes: int, iou_threshold: float = 0.5) -> APResult:
    """Per-class all-points AP at ``iou_threshold``; mAP over classes that have ground truth.

    ``gt_boxes[i]`` holds unit center/size boxes of image ``i``. Classes without
    ground truth get AP ``nan``.
    """
    per_class, curves, counts = [], {}, []
    for c in range(num_classes):
        conf, tp, n_gt = _match_class(detections, gt_boxes, gt_classes, c, iou_threshold)
        ap, r, p = _all_points_ap(conf, tp, n_gt)
        per_class.append(ap)
        curves[c] = (r, p)
        counts.append(n_gt)
    valid = [a for a in per_class if not math.isnan(a)]
    return APResult(per_class, float(np.mean(valid)) if valid else math.nan, curves, counts)


def evaluate_model(model, images, gt_boxes, gt_classes, conf_threshold: float = 0.05,
                   iou_threshold: float = 0.5, matrix_conf: float = 0.25):
    """Run ``model.detect`` and return (APResult, ConfusionMatrix, detections)."""
    dets = model.detect(images, conf_threshold=conf_threshold)
    ap = average_precision_map(dets, gt_boxes, gt_classes, model.cfg.num_classes, iou_threshold)
    kept = [[d for d in ds if d.confidence >= matrix_conf] for ds in dets]
    cm = confusion_matrix(kept, gt_boxes, gt_classes, model.cfg.num_classes, iou_threshold)
    return ap, cm, dets


# --------------------------------------------------------------------------
# k-fold


@dataclass
class KFoldResult:
    folds: list[np.ndarray]
    scores: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores))

    def summary(self, digits: int = 1) -> str:
        return format_mean_std(self.scores, digits)


def format_mean_std(scores: Sequence[float], digits: int = 1) -> str:
    """``mean ± population std`` rounded to ``digits`` decimals."""
    a = np.asarray(scores, dtype=float)
    return f"{a.mean():.{digits}f} ± {a.std():.{digits}f}"


def kfold_cross_validation(items: Sequence, k: int, seed: int = 0,
                           score_fn: Callable[[np.ndarray, np.ndarray], float] | None = None) -> KFoldResult:
    """Seeded shuffle into ``k`` disjoint folds of near-equal size.

    ``score_fn(train_idx, test_idx)`` is called per fold when given.
    """
    n = len(items)
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= {n}, got {k}")
    order = np.random.default_rng(seed).permutation(n)
    folds = [np.sort(f) for f in np.array_split(order, k)]
    scores = []
    if score_fn is not None:
        for i, test in enumerate(folds):
            train = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
            scores.append(float(score_fn(train, test)))
    return KFoldResult(folds, scores)


# --------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return "n/a" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def aligned_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(headers)] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def csv_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(headers)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def class_ap_rows(result: APResult, class_names: Sequence[str]) -> list[list]:
    """One row per class in class-table order, AP in percent, then the mAP row."""
    rows = [[name, result.gt_counts[i] if result.gt_counts else "", 100 * result.per_class[i]]
            for i, name in enumerate(class_names)]
    rows.append(["mAP", sum(result.gt_counts), 100 * result.map])
    return rows


def confusion_rows(cm: ConfusionMatrix, class_names: Sequence[str]) -> tuple[list[str], list[list]]:
    names = list(class_names) + ["background"]
    headers = ["gt \\ pred"] + names
    return headers, [[names[i]] + [int(v) for v in row] for i, row in enumerate(cm.counts)]
