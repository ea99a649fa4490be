"""Mini-batch training loop: SGD with weight decay and cosine decay, optional adaptive phase."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numkernel as nk
from .detector import Detector, ModelConfig, load_checkpoint, save_checkpoint
from .head import FocalParams

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 350
    batch_size: int = 64
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    loss: str = "focal"
    alpha_box: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    adversarial: bool = False
    momentum: float = 0.9
    adaptive_fraction: float = 0.5
    adaptive_lr: float = 0.001
    warmup_epochs: int = 0
    uap_xi: float = 0.1
    uap_samples: int = 64
    checkpoint_every: int = 0
    eval_every: int = 1
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.weight_decay < 0 or self.learning_rate <= 0:
            raise ValueError("weight_decay must be >= 0 and learning_rate > 0")
        if self.optimizer not in ("sgd", "sgd_then_adaptive"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("focal", "ce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.adaptive_fraction <= 1.0:
            raise ValueError("adaptive_fraction must lie in [0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


def _decays(name: str) -> bool:
    return not name.endswith("beta")


class Optimizer:
    """SGD with momentum and additive weight-decay gradient, switching to Adam after
    ``adaptive_fraction`` of the steps when ``optimizer == 'sgd_then_adaptive'``.
    """

    def __init__(self, model: Detector, cfg: TrainConfig, total_steps: int):
        self.cfg = cfg
        self.total_steps = max(total_steps, 1)
        self.params = list(model.named_parameters())
        self.step_count = 0
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params}
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.adam_steps = 0

    @property
    def switch_step(self) -> int:
        if self.cfg.optimizer == "sgd":
            return self.total_steps + 1
        return int(round(self.cfg.adaptive_fraction * self.total_steps))

    def lr(self) -> float:
        steps_per_epoch = self.total_steps / self.cfg.epochs
        warm = self.cfg.warmup_epochs * steps_per_epoch
        if self.step_count < warm:
            return self.cfg.learning_rate * (self.step_count + 1) / warm
        return 0.5 * self.cfg.learning_rate * (1 + math.cos(math.pi * self.step_count / self.total_steps))

    def step(self) -> float:
        cfg = self.cfg
        lr = self.lr()
        adaptive = self.step_count >= self.switch_step
        if adaptive:
            self.adam_steps += 1
        for name, p in self.params:
            g = p.grad
            if cfg.weight_decay and _decays(name):
                g = g + cfg.weight_decay * p.data
            if adaptive:
                b1, b2 = 0.9, 0.999
                self.m[name] = b1 * self.m[name] + (1 - b1) * g
                self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
                mh = self.m[name] / (1 - b1**self.adam_steps)
                vh = self.v[name] / (1 - b2**self.adam_steps)
                scale = cfg.adaptive_lr / cfg.learning_rate
                p.data = p.data - lr * scale * mh / (np.sqrt(vh) + 1e-8)
            else:
                self.velocity[name] = cfg.momentum * self.velocity[name] + g
                p.data = p.data - lr * self.velocity[name]
        self.step_count += 1
        return lr

    def state(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.array(self.step_count), "adam_steps": np.array(self.adam_steps)}
        for key, store in (("velocity", self.velocity), ("m", self.m), ("v", self.v)):
            for n, a in store.items():
                out[f"{key}/{n}"] = a
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step_count"].item())
        self.adam_steps = int(state["adam_steps"].item())
        for key, store in (("velocity", self.velocity), ("m", self.m), ("v", self.v)):
            for n in store:
                store[n] = np.array(state[f"{key}/{n}"])


@dataclass
class TrainData:
    """Float images plus precomputed per-anchor labels and coded box targets."""

    images: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    boxes: list[np.ndarray]
    classes: list[np.ndarray]

    @classmethod
    def build(cls, model: Detector, images: np.ndarray, boxes, classes) -> "TrainData":
        enc = [model.encode_targets(b, c) for b, c in zip(boxes, classes)]
        return cls(
            np.asarray(images, dtype=np.float64),
            np.stack([e[0] for e in enc]),
            np.stack([e[1] for e in enc]),
            [np.asarray(b, dtype=float).reshape(-1, 4) for b in boxes],
            [np.asarray(c, dtype=int) for c in classes],
        )

    def __len__(self) -> int:
        return len(self.images)


def train_step(model: Detector, opt: Optimizer, images, labels, targets, cfg: TrainConfig) -> dict:
    """One forward / backward / update on a batch. Raises NumericError on a non-finite loss."""
    model.zero_grad()
    with nk.Tape() as tape:
        out = model(images)
        total, parts = model.loss(out, labels, targets, kind=cfg.loss,
                                  focal=FocalParams(cfg.focal_alpha, cfg.focal_gamma), alpha_box=cfg.alpha_box)
    if not np.isfinite(total.item()):
        raise NumericError(f"non-finite loss at step {opt.step_count}")
    nk.backward_pass(tape, total)
    lr = opt.step()
    return {"loss": total.item(), "lr": lr, **parts}


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainResult:
    model: Detector
    curves: list[dict]
    optimizer: Optimizer


CURVE_FIELDS = ("epoch", "lr", "loss", "cls", "box", "val_map", "perturbed_fraction", "seconds")


def write_curves(path, curves: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in curves:
            w.writerow({k: row.get(k, "") for k in CURVE_FIELDS})


def train_model(
    cfg: TrainConfig,
    train: TrainData,
    val: TrainData | None = None,
    model: Detector | None = None,
    model_cfg: ModelConfig | None = None,
    out_dir=None,
    resume=None,
    stop_after: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Seeded mini-batch training; writes ``curves.csv`` and checkpoints under ``out_dir``.

    ``resume`` names a checkpoint written by an earlier call with the same config;
    training continues from its epoch counter and reproduces the uninterrupted run.
    ``stop_after`` ends the run early after that many total epochs (the schedule
    still assumes ``cfg.epochs``).
    """
    from .adversarial import (
        UAPConfig, adversarial_train_step, compute_uap, curriculum_fraction, detection_loss_fn,
    )
    from .evalmetrics import evaluate_model

    if len(train) == 0:
        raise ValueError("empty training split")
    dtype = np.dtype(cfg.precision)
    if resume is not None:
        model, opt_state, meta = load_checkpoint(resume)
    elif model is None:
        model = Detector(model_cfg or ModelConfig(seed=cfg.seed))
    cast_parameters(model, dtype)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    opt = Optimizer(model, cfg, steps_per_epoch * cfg.epochs)
    curves: list[dict] = []
    start = 0
    if resume is not None:
        opt.load_state(opt_state)
        start = int(meta["epoch"])
        curves = list(meta.get("curves", []))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    images = train.images.astype(dtype)
    extra = {"train_config": cfg.to_dict()}

    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    with nk.precision(dtype):
        for epoch in range(start, last):
            t0 = time.perf_counter()
            frac = curriculum_fraction(epoch, cfg.epochs) if cfg.adversarial else 0.0
            uap = None
            if frac > 0:
                uap = compute_uap(model, images, detection_loss_fn(model, train.labels, train.targets, cfg.loss),
                                  UAPConfig(cfg.uap_xi, cfg.uap_samples, seed=cfg.seed * 100003 + epoch))
            sums = {"loss": 0.0, "cls": 0.0, "box": 0.0}
            lr = opt.lr()
            for b, idx in enumerate(epoch_batches(len(train), cfg.batch_size, cfg.seed, epoch)):
                x, lab, tgt = images[idx], train.labels[idx], train.targets[idx]
                if uap is not None:
                    rng = np.random.default_rng([cfg.seed, epoch, b, 3])
                    stats = adversarial_train_step(model, opt, x, lab, tgt, uap, frac, cfg, rng)
                else:
                    stats = train_step(model, opt, x, lab, tgt, cfg)
                lr = stats["lr"]
                for k in sums:
                    sums[k] += stats[k] * len(idx)
            row = {"epoch": epoch + 1, "lr": lr, **{k: v / len(train) for k, v in sums.items()},
                   "perturbed_fraction": frac}
            if val is not None and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == last):
                row["val_map"] = evaluate_model(model, val.images.astype(dtype), val.boxes, val.classes)[0].map
            row["seconds"] = time.perf_counter() - t0
            curves.append(row)
            log.info("epoch %d %s", epoch + 1, {k: round(v, 5) for k, v in row.items() if isinstance(v, float)})
            if on_epoch is not None:
                on_epoch(row)
            if out_dir is not None:
                write_curves(out_dir / "curves.csv", curves)
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"epoch{epoch + 1:04d}.ckpt", model, opt.state(), epoch + 1,
                                    {"curves": _strip_time(curves), **extra})
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", model, opt.state(), last,
                        {"curves": _strip_time(curves), **extra})
    return TrainResult(model, curves, opt)


def cast_parameters(model: Detector, dtype) -> None:
    for p in model.parameters():
        p.data = p.data.astype(dtype)
        p.grad = np.zeros_like(p.data)


def _strip_time(curves: list[dict]) -> list[dict]:
    # wall-clock seconds would break byte-identical checkpoints
    return [{k: v for k, v in row.items() if k != "seconds"} for row in curves]


def smoothed(values, window: int = 5) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
