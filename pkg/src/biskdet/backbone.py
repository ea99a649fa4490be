"""MBConv feature extractor producing a multi-level pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .numkernel import Module, Parameter, Tensor


def compute_feature_resolution(alpha: float, S: float, R: int) -> int:
    """ceil(alpha * S / R): feature-map extent for shorter side S at down-sampling rate R."""
    if alpha <= 0 or S <= 0 or R <= 0:
        raise ValueError("alpha, S and R must be positive")
    # exact for the rational inputs used in practice; guards 16.875000000001-style noise
    return math.ceil(round(alpha * S / R, 9))


@dataclass(frozen=True)
class MBConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    expansion: int = 4
    stride: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size, self.expansion) <= 0:
            raise ValueError(f"non-positive MBConv field in {self}")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")

    @property
    def has_shortcut(self) -> bool:
        return self.in_channels == self.out_channels and self.stride == 1


def _default_stages():
    return [
        [MBConvSpec(3, 16, stride=2), MBConvSpec(16, 16, stride=2), MBConvSpec(16, 16, stride=2)],
        [MBConvSpec(16, 24, stride=2)],
        [MBConvSpec(24, 32, stride=2)],
    ]


@dataclass
class BackboneConfig:
    """Stages of MBConv blocks; the output of every stage is a pyramid level."""

    stages: list[list[MBConvSpec]] = field(default_factory=_default_stages)
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        for prev, nxt in zip(self._flat(), self._flat()[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(f"channel chain broken between {prev} and {nxt}")

    def _flat(self):
        return [s for stage in self.stages for s in stage]

    @property
    def tap_strides(self) -> list[int]:
        out, r = [], 1
        for stage in self.stages:
            for spec in stage:
                r *= spec.stride
            out.append(r)
        return out

    @property
    def tap_channels(self) -> list[int]:
        return [stage[-1].out_channels for stage in self.stages]


class MBConv(Module):
    """Depthwise -> pointwise expand -> swish(beta) -> pointwise project -> [+x] -> relu."""

    def __init__(self, spec: MBConvSpec, rng: np.random.Generator, name: str = ""):
        self.spec = spec
        k, d, t = spec.in_channels, spec.kernel_size, spec.expansion
        self.depthwise = Parameter(nk.he_normal((d, d, k), d * d, rng), f"{name}.depthwise")
        self.expand = Parameter(nk.he_normal((1, 1, k, k * t), k, rng), f"{name}.expand")
        self.project = Parameter(
            nk.he_normal((1, 1, k * t, spec.out_channels), k * t, rng), f"{name}.project"
        )
        self.beta = Parameter(np.ones(1), f"{name}.beta")

    def expanded(self, x: Tensor) -> Tensor:
        xd = nk.depthwise_conv2d(x, self.depthwise, stride=self.spec.stride, padding="same")
        return nk.swish(nk.pointwise_conv2d(xd, self.expand), self.beta)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} channels, got {x.shape[-1]}")
        out = nk.pointwise_conv2d(self.expanded(x), self.project)
        if self.spec.has_shortcut:
            out = nk.add(x, out)
        return nk.relu(out)


def mbconv_forward(x: Tensor, block: MBConv) -> Tensor:
    return block(x)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig | None = None, seed: int = 0):
        self.cfg = cfg or BackboneConfig()
        rng = np.random.default_rng(seed)
        self.stages = [
            [MBConv(spec, rng, f"stage{i}.{j}") for j, spec in enumerate(stage)]
            for i, stage in enumerate(self.cfg.stages)
        ]

    def named_parameters(self, prefix: str = ""):
        for i, stage in enumerate(self.stages):
            for j, block in enumerate(stage):
                yield from block.named_parameters(f"{prefix}stages.{i}.{j}.")

    def __call__(self, image) -> list[Tensor]:
        x = image if isinstance(image, Tensor) else Tensor(image)
        h, w = x.shape[-3], x.shape[-2]
        deepest = self.cfg.tap_strides[-1]
        if self.cfg.alpha != 1.0:
            x = nk.resize_nearest(
                x, math.ceil(round(self.cfg.alpha * h, 9)), math.ceil(round(self.cfg.alpha * w, 9))
            )
            h, w = x.shape[-3], x.shape[-2]
        if min(h, w) < deepest:
            raise ValueError(f"image {h}x{w} too small for down-sampling rate {deepest}")
        levels = []
        for stage in self.stages:
            for block in stage:
                x = block(x)
            levels.append(x)
        return levels


def backbone_forward(image, backbone: Backbone) -> list[Tensor]:
    """Ordered pyramid P_1 (finest) .. P_n (deepest)."""
    return backbone(image)
