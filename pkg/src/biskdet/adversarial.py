"""Universal adversarial perturbations and curriculum adversarial training."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blob
from . import numkernel as nk
from .head import FocalParams
from .numkernel import Tensor


@dataclass(frozen=True)
class UAPConfig:
    """``max_norm`` bounds every pixel of the perturbation, in [0, 1] pixel units.

    Sensitivities are drawn uniformly from ``(sensitivity_low, 1]``. The default
    ``sensitivity_low = 0`` keeps every draw positive so the aggregate follows the
    loss gradient; ``sensitivity_low = -1`` gives the symmetric ``(-1, 1]`` draw.
    """

    max_norm: float = 0.1
    sample_count: int = 64
    seed: int = 0
    sensitivity_low: float = 0.0
    batch_size: int = 32

    def __post_init__(self):
        if self.max_norm < 0:
            raise ValueError("max_norm must be nonnegative")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        if not -1.0 <= self.sensitivity_low < 1.0:
            raise ValueError("sensitivity_low must lie in [-1, 1)")


@dataclass
class Perturbation:
    data: np.ndarray
    max_norm: float

    def __post_init__(self):
        if np.max(np.abs(self.data), initial=0.0) > self.max_norm:
            raise ValueError("perturbation exceeds its max-norm bound")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def apply(self, images: np.ndarray) -> np.ndarray:
        """``clamp(x + U, 0, 1)`` for one image or a batch."""
        images = np.asarray(images)
        if images.shape[-self.data.ndim :] != self.data.shape:
            raise ValueError(f"perturbation shape {self.data.shape} does not match inputs {images.shape}")
        return np.clip(images + self.data, 0.0, 1.0)

    def save(self, path) -> None:
        blob.save(path, {"uap": self.data}, {"max_norm": self.max_norm})

    @classmethod
    def load(cls, path) -> "Perturbation":
        tensors, meta = blob.load(path)
        return cls(tensors["uap"], float(meta["max_norm"]))


LossFn = Callable[[Tensor, np.ndarray], Tensor]


def detection_loss_fn(model, labels: np.ndarray, targets: np.ndarray, kind: str = "focal") -> LossFn:
    """Loss closure ``f(x, idx)`` over rows ``idx`` of precomputed anchor targets."""

    def f(x: Tensor, idx: np.ndarray) -> Tensor:
        out = model(x)
        total, _ = model.loss(out, labels[idx], targets[idx], kind=kind, focal=FocalParams())
        return total

    return f


def input_gradients(images: np.ndarray, loss_fn: LossFn, batch_size: int = 32) -> np.ndarray:
    """d(loss)/d(input) for every image, evaluated in batches of ``batch_size``."""
    grads = np.empty(images.shape, dtype=np.float64)
    for lo in range(0, len(images), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(images)))
        x = Tensor(images[idx], requires_grad=True)
        with nk.Tape() as tape:
            loss = loss_fn(x, idx)
        nk.backward_pass(tape, loss)
        grads[idx] = x.grad
    return grads


def compute_uap(model, images: np.ndarray, loss_fn: LossFn, cfg: UAPConfig = UAPConfig()) -> Perturbation:
    """One image-shaped perturbation ``max_norm * sign(sum_i grad_i * weight_i)`` applied per pixel.

    ``grad_i`` is the input gradient of ``loss_fn`` for sample image ``i`` and
    ``weight_i`` a seeded uniform draw of the same shape. ``model`` is only
    reached through ``loss_fn``. The model parameters' gradient buffers are
    left zeroed.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("need a nonempty (N, H, W, C) image sample")
    n = min(cfg.sample_count, len(images))
    rng = np.random.default_rng(cfg.seed)
    pick = np.sort(rng.permutation(len(images))[:n])
    grads = input_gradients(images[pick], lambda x, idx: loss_fn(x, pick[idx]), cfg.batch_size)
    if model is not None and hasattr(model, "zero_grad"):
        model.zero_grad()
    # (sensitivity_low, 1]: one minus a draw from [0, 1) lies in (0, 1]
    weights = cfg.sensitivity_low + (1.0 - cfg.sensitivity_low) * (1.0 - rng.random(grads.shape))
    aggregate = np.zeros(images.shape[1:])
    for i in range(n):  # fixed reduction order
        aggregate += grads[i] * weights[i]
    return Perturbation(cfg.max_norm * np.sign(aggregate), cfg.max_norm)


def curriculum_fraction(epoch: int, epochs: int, max_fraction: float = 0.5) -> float:
    """Perturbed share of each batch: linear 0 -> ``max_fraction`` over the first half, then flat."""
    half = epochs / 2
    if half <= 0:
        return max_fraction
    return max_fraction * min(1.0, epoch / half)


def perturb_batch(images: np.ndarray, uap: Perturbation, fraction: float, rng: np.random.Generator):
    """Perturb ``round(fraction * N)`` seeded-random images of the batch; returns (batch, chosen)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(images)
    k = math.floor(fraction * n + 0.5)
    if images.shape[1:] != uap.shape:
        raise ValueError(f"perturbation shape {uap.shape} does not match inputs {images.shape[1:]}")
    if k == 0:
        return images, np.zeros(0, dtype=int)
    chosen = np.sort(rng.permutation(n)[:k])
    out = np.array(images, copy=True)
    out[chosen] = uap.apply(images[chosen])
    return out, chosen


def adversarial_train_step(model, opt, images, labels, targets, uap: Perturbation, fraction: float, cfg, rng):
    """``train_step`` on a batch where a ``fraction`` of the images carries the UAP."""
    from .training import train_step

    mixed, _ = perturb_batch(images, uap, fraction, rng)
    return train_step(model, opt, mixed, labels, targets, cfg)
