"""BiSkFPN: top-down deconvolution fusion with concatenation and additive skips."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import Module, Parameter, Tensor


@dataclass(frozen=True)
class FusionConfig:
    kernel_size: int = 2
    stride: int = 2
    channels: int = 32
    repeats: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.repeats < 1 or self.stride < 1 or self.channels < 1:
            raise ValueError(f"invalid fusion config {self}")


def skip_project(src: Tensor, target_shape, weights: Parameter | None = None) -> Tensor:
    """Bring ``src`` to ``target_shape`` (H, W, C) by nearest resize and a 1x1 projection.

    Matching shapes pass through untouched.
    """
    th, tw, tc = target_shape[-3:]
    h, w, c = src.shape[-3:]
    out = src
    if (h, w) != (th, tw):
        out = nk.resize_nearest(out, th, tw)
    if c != tc:
        if weights is None:
            raise ValueError(f"channel change {c}->{tc} needs projection weights")
        out = nk.pointwise_conv2d(out, weights)
    return out


class BiSkFPNBlock(Module):
    """One application of the fusion recurrence over ``len(level_channels)`` levels.

    Starting at the deepest level n::

        F_n = concat(P_n, deconv(P_n))                       (extent-preserving deconv)
        F_i = concat(P_i, deconv(F_{i+1})) + skip(P_{i-1})   for i = n-1 .. 1

    with no skip term at i = 1. Every F_i is also projected to ``channels`` and
    relu'd, giving per-level outputs that can feed another block.
    """

    def __init__(self, level_channels: list[int], cfg: FusionConfig, rng: np.random.Generator):
        if len(level_channels) < 2:
            raise ValueError("fusion needs at least two pyramid levels")
        self.level_channels = list(level_channels)
        self.cfg = cfg
        k, cf = cfg.kernel_size, cfg.channels
        n = len(level_channels)
        fused = [c + cf for c in level_channels]
        self.init_deconv = Parameter(
            nk.he_normal((k, k, level_channels[-1], cf), k * k * level_channels[-1], rng), "init_deconv"
        )
        # deconvs[i] upsamples F_{i+1} onto level i
        self.deconvs = [
            Parameter(nk.he_normal((k, k, fused[i + 1], cf), k * k * fused[i + 1], rng), f"deconv{i}")
            for i in range(n - 1)
        ]
        # skips[i] maps P_{i-1} onto F_i, i >= 1 (0-based)
        self.skips = [None] + [
            Parameter(nk.he_normal((1, 1, level_channels[i - 1], fused[i]), level_channels[i - 1], rng), f"skip{i}")
            for i in range(1, n - 1)
        ]
        self.out_proj = [
            Parameter(nk.he_normal((1, 1, fused[i], cf), fused[i], rng), f"out{i}") for i in range(n)
        ]

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}init_deconv", self.init_deconv
        for i, p in enumerate(self.deconvs):
            yield f"{prefix}deconvs.{i}", p
        for i, p in enumerate(self.skips):
            if p is not None:
                yield f"{prefix}skips.{i}", p
        for i, p in enumerate(self.out_proj):
            yield f"{prefix}out_proj.{i}", p

    def fuse(self, levels: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        n = len(self.level_channels)
        if len(levels) != n:
            raise ValueError(f"expected {n} levels, got {len(levels)}")
        for i in range(n - 1):
            h, w = levels[i].shape[-3:-1]
            hc, wc = levels[i + 1].shape[-3:-1]
            if not (hc < h <= hc * self.cfg.stride and wc < w <= wc * self.cfg.stride):
                raise ValueError(
                    f"level {i} extent {(h, w)} incompatible with level {i + 1} extent {(hc, wc)}"
                )
        fused: list[Tensor] = [None] * n
        deep = levels[-1]
        up = nk.transposed_conv2d(deep, self.init_deconv, stride=1, output_size=deep.shape[-3:-1])
        fused[-1] = nk.concat_channels([deep, up])
        for i in range(n - 2, -1, -1):
            target = levels[i].shape[-3:-1]
            up = nk.transposed_conv2d(fused[i + 1], self.deconvs[i], stride=self.cfg.stride, output_size=target)
            f = nk.concat_channels([levels[i], up])
            if i >= 1:
                f = nk.add(f, skip_project(levels[i - 1], f.shape, self.skips[i]))
            fused[i] = f
        outs = [nk.relu(nk.pointwise_conv2d(f, p)) for f, p in zip(fused, self.out_proj)]
        return fused[0], outs


class BiSkFPN(Module):
    def __init__(self, level_channels: list[int], cfg: FusionConfig | None = None, seed: int = 1):
        self.cfg = cfg or FusionConfig()
        rng = np.random.default_rng(seed)
        n = len(level_channels)
        self.blocks = [BiSkFPNBlock(level_channels, self.cfg, rng)]
        for _ in range(self.cfg.repeats - 1):
            self.blocks.append(BiSkFPNBlock([self.cfg.channels] * n, self.cfg, rng))

    def named_parameters(self, prefix: str = ""):
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"{prefix}blocks.{i}.")

    def __call__(self, levels: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        fused, outs = None, levels
        for block in self.blocks:
            fused, outs = block.fuse(outs)
        return fused, outs


def biskfpn_fuse(levels: list[Tensor], fpn: BiSkFPN) -> tuple[Tensor, list[Tensor]]:
    """Returns the finest fused map F and the per-level projected maps."""
    return fpn(levels)
