"""Toy-scale protocol shared by scripts, CLI and acceptance tests.

Three independently seeded synthetic sets (600 / 200 / 100 images at 64x64),
anchors from the Jaccard k-means search on the training boxes, and a detector
whose input standardisation comes from training-set statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .anchorsearch import AnchorConfig, compute_anchor_hyperparameters
from .dataio import DatasetManifest, generate_synthetic_dataset
from .detector import Detector, ModelConfig
from .training import TrainConfig, TrainData

TOY_SIZES = {"train": 600, "val": 200, "test": 100}
TOY_SEEDS = {"train": 11, "val": 12, "test": 13}


def toy_train_config(**overrides) -> TrainConfig:
    """Settings used for the toy runs (Adam throughout, CE loss, 150 epochs)."""
    base = dict(
        epochs=150,
        batch_size=32,
        optimizer="sgd_then_adaptive",
        adaptive_fraction=0.0,
        adaptive_lr=0.003,
        loss="ce",
        seed=0,
        eval_every=10,
        precision="float32",
    )
    base.update(overrides)
    return TrainConfig(**base)


def anchors_from_boxes(boxes_unit: list[np.ndarray], image_size, k: int = 4, seed: int = 0) -> AnchorConfig:
    h, w = image_size
    wh = np.concatenate([np.asarray(b, dtype=float).reshape(-1, 4)[:, 2:] for b in boxes_unit]) * [w, h]
    return compute_anchor_hyperparameters(wh, k, seed=seed)


def model_config_for(images: np.ndarray, boxes_unit, seed: int = 0, k: int = 4, **overrides) -> ModelConfig:
    """Anchors searched on ``boxes_unit``; input mean/std from ``images``."""
    size = images.shape[1:3]
    cfg = ModelConfig(
        image_size=tuple(int(v) for v in size),
        anchors=anchors_from_boxes(boxes_unit, size, k=k, seed=seed),
        seed=seed,
        input_mean=tuple(float(v) for v in images.mean(axis=(0, 1, 2))),
        input_std=tuple(float(v) for v in images.std(axis=(0, 1, 2))),
    )
    return replace(cfg, **overrides)


def manifest_arrays(manifest: DatasetManifest) -> tuple[list[np.ndarray], list[np.ndarray]]:
    return [r.boxes() for r in manifest.records], [r.classes() for r in manifest.records]


# Prediction layers sit directly on the fused map for the toy runs. With two head
# convolutions the heatmap argmax landed inside the box for 43% of hits, versus 82% here.
TOY_HEAD_DEPTH = 0


@dataclass
class ToySplits:
    train: TrainData
    val: TrainData
    test: TrainData
    model_cfg: ModelConfig


def toy_splits(seed_offset: int = 0, image_size=(64, 64), sizes=None, k: int = 4, model_seed: int = 0,
               head_depth: int = TOY_HEAD_DEPTH) -> ToySplits:
    sizes = sizes or TOY_SIZES
    raw = {
        name: generate_synthetic_dataset(sizes[name], image_size=image_size, seed=TOY_SEEDS[name] + seed_offset)
        for name in ("train", "val", "test")
    }
    tr_imgs = raw["train"].float_images()
    tr_boxes, _ = manifest_arrays(raw["train"].manifest)
    mcfg = model_config_for(tr_imgs, tr_boxes, seed=model_seed, k=k, head_depth=head_depth)
    probe = Detector(mcfg)
    out = {}
    for name, ds in raw.items():
        boxes, classes = manifest_arrays(ds.manifest)
        out[name] = TrainData.build(probe, ds.float_images(), boxes, classes)
    return ToySplits(out["train"], out["val"], out["test"], mcfg)


def attacked_map(model: Detector, splits: ToySplits, max_norm: float = 0.1, seed: int = 1, kind: str = "ce"):
    """Test mAP under a UAP computed against ``model`` from training images; returns (mAP, UAP)."""
    from .adversarial import UAPConfig, compute_uap, detection_loss_fn
    from .evalmetrics import evaluate_model

    tr, te = splits.train, splits.test
    uap = compute_uap(model, tr.images, detection_loss_fn(model, tr.labels, tr.targets, kind),
                      UAPConfig(max_norm=max_norm, sample_count=64, seed=seed))
    return evaluate_model(model, uap.apply(te.images), te.boxes, te.classes)[0].map, uap


def heatmap_hit_rate(model: Detector, data: TrainData, mode: str = "gradcam") -> tuple[float, int]:
    """Share of correctly detected objects whose heatmap argmax lies inside their GT box.

    An object counts as correctly detected when a same-class detection
    (confidence >= 0.25) overlaps it at IoU >= 0.5.
    """
    from .explain import argmax_in_box, gradcam_heatmap
    from .geometry import center_to_corners, iou_matrix

    dets = model.detect(data.images)
    hits = total = 0
    for img, boxes, classes, ds in zip(data.images, data.boxes, data.classes, dets):
        for box, cls in zip(boxes, classes):
            same = [d for d in ds if d.class_id == cls]
            if not same:
                continue
            ious = iou_matrix(center_to_corners(box[None]), np.array([d.box.corners() for d in same]))[0]
            if ious.max() < 0.5:
                continue
            total += 1
            hits += argmax_in_box(gradcam_heatmap(model, img, int(cls), mode=mode), box)
    return hits / max(total, 1), total
