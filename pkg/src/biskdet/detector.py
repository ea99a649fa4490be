"""Backbone -> BiSkFPN -> head assembly, target encoding and checkpointing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import blob
from . import numkernel as nk
from .anchorsearch import AnchorConfig
from .backbone import Backbone, BackboneConfig, MBConvSpec
from .fusion import BiSkFPN, FusionConfig
from .geometry import center_to_corners
from .head import (
    IGNORED,
    BoxCoder,
    Detection,
    DetectionHead,
    FocalParams,
    assign_anchors_to_targets,
    decode_and_nms,
    generate_anchors,
    loss_box_smooth_l1,
    loss_classification_ce,
    loss_focal,
)
from .numkernel import Module, Tensor

CHECKPOINT_VERSION = 1


def _default_anchors() -> AnchorConfig:
    return AnchorConfig(aspect_ratios=[0.5, 1.0, 2.0], scales=[0.5, 0.8])


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 6
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    anchors: AnchorConfig = field(default_factory=_default_anchors)
    template: float = 32.0
    head_depth: int = 2
    box_scale: float = 0.1
    seed: int = 0
    # per-channel input standardisation, (x - mean) / std
    input_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    input_std: tuple[float, ...] = (0.25, 0.25, 0.25)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = d["backbone"]
        return cls(
            image_size=tuple(d["image_size"]),
            num_classes=d["num_classes"],
            backbone=BackboneConfig(
                stages=[[MBConvSpec(**s) for s in stage] for stage in bb["stages"]], alpha=bb["alpha"]
            ),
            fusion=FusionConfig(**d["fusion"]),
            anchors=AnchorConfig(**{**d["anchors"], "centroids": [tuple(c) for c in d["anchors"]["centroids"]]}),
            template=d["template"],
            head_depth=d["head_depth"],
            box_scale=d["box_scale"],
            seed=d["seed"],
            input_mean=tuple(d["input_mean"]),
            input_std=tuple(d["input_std"]),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ForwardOutput:
    logits: Tensor
    offsets: Tensor
    features: Tensor
    fused: Tensor


class Detector(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        self.backbone = Backbone(c.backbone, seed=c.seed)
        self.fusion = BiSkFPN(c.backbone.tap_channels, c.fusion, seed=c.seed + 1)
        shapes = c.anchors.shapes(c.template)
        self.head = DetectionHead(c.fusion.channels, len(shapes), c.num_classes, seed=c.seed + 2,
                                  depth=c.head_depth)
        stride = c.backbone.tap_strides[0]
        gh, gw = -(-c.image_size[0] // stride), -(-c.image_size[1] // stride)
        self.anchors = generate_anchors(gh, gw, shapes, c.image_size[0], c.image_size[1])
        self.coder = BoxCoder(c.box_scale)

    def normalize(self, x: Tensor) -> Tensor:
        mean = np.asarray(self.cfg.input_mean, dtype=float)
        inv = 1.0 / np.asarray(self.cfg.input_std, dtype=float)
        return nk.mul(nk.add(x, -mean), inv)

    def forward(self, images) -> ForwardOutput:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim == 3:
            x = nk.reshape(x, (1,) + x.shape)
        x = self.normalize(x)
        levels = self.backbone(x)
        fused, outs = self.fusion(levels)
        logits, offsets = self.head(outs[0])
        return ForwardOutput(logits, offsets, outs[0], fused)

    __call__ = forward

    # ------------------------------------------------------------------ targets

    def encode_targets(self, boxes: np.ndarray, classes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Anchor labels (class / -1 negative / -2 ignored) and coded box targets for one image."""
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        a = assign_anchors_to_targets(center_to_corners(self.anchors), center_to_corners(boxes), classes)
        targets = np.zeros_like(self.anchors)
        pos = a.positive
        if pos.any():
            targets[pos] = self.coder.encode(boxes[a.matched[pos]], self.anchors[pos])
        return a.labels, targets

    def loss(self, out: ForwardOutput, labels: np.ndarray, targets: np.ndarray, kind: str = "focal",
             focal: FocalParams = FocalParams(), alpha_box: float = 1.0) -> tuple[Tensor, dict]:
        """Classification + alpha_box * box loss over a batch (regularisation handled by the optimiser)."""
        c = self.cfg.num_classes
        labels = np.asarray(labels).reshape(-1)
        counted = labels != IGNORED
        cls_idx = np.where(labels >= 0, labels, c)
        onehot = np.zeros((labels.size, c + 1))
        onehot[np.arange(labels.size), cls_idx] = 1.0
        probs = nk.softmax(nk.reshape(out.logits, (-1, c + 1)), axis=-1)
        if kind == "ce":
            l_cls = loss_classification_ce(probs, onehot, counted)
        elif kind == "focal":
            p_t = nk.tsum(nk.mul(probs, onehot), axis=-1)
            l_cls = loss_focal(p_t, focal, counted)
        else:
            raise ValueError(f"unknown classification loss {kind!r}")
        l_box = loss_box_smooth_l1(np.asarray(targets).reshape(-1, 4), nk.reshape(out.offsets, (-1, 4)), labels >= 0)
        total = nk.add(l_cls, nk.mul(l_box, alpha_box))
        return total, {"cls": l_cls.item(), "box": l_box.item()}

    # ---------------------------------------------------------------- inference

    def predict_raw(self, images, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        probs, offs = [], []
        for i in range(0, len(images), batch_size):
            out = self.forward(images[i : i + batch_size])
            z = out.logits.data
            e = np.exp(z - z.max(axis=-1, keepdims=True))
            probs.append(e / e.sum(axis=-1, keepdims=True))
            offs.append(out.offsets.data)
        return np.concatenate(probs), np.concatenate(offs)

    def detect(self, images, conf_threshold: float = 0.25, nms_threshold: float = 0.5,
               batch_size: int = 64) -> list[list[Detection]]:
        probs, offs = self.predict_raw(images, batch_size)
        return [
            decode_and_nms(p, o, self.anchors, conf_threshold, nms_threshold, self.coder)
            for p, o in zip(probs, offs)
        ]

    # -------------------------------------------------------------- checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ValueError("checkpoint parameters do not match the model")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)


def save_checkpoint(path, model: Detector, optimizer_state: dict[str, np.ndarray] | None = None,
                    epoch: int = 0, extra: dict | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k, v in (optimizer_state or {}).items():
        tensors[f"opt/{k}"] = v
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config": model.cfg.to_dict(),
        "config_digest": model.cfg.digest(),
        **(extra or {}),
    }
    blob.save(path, tensors, meta)


def load_checkpoint(path) -> tuple[Detector, dict[str, np.ndarray], dict]:
    tensors, meta = blob.load(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    cfg = ModelConfig.from_dict(meta["config"])
    if cfg.digest() != meta["config_digest"]:
        raise ValueError("checkpoint config digest mismatch")
    model = Detector(cfg)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
    opt = {k[4:]: v for k, v in tensors.items() if k.startswith("opt/")}
    return model, opt, meta
