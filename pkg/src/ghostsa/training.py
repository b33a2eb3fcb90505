"""Momentum SGD, learning-rate schedules and the train/evaluate loops."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adder import adder_lr_scale
from .checkpoint import save_checkpoint
from .datasets import iterate_batches, random_crop_flip
from .exceptions import DimensionError, ValidationError
from .ghost import loss_and_gradients

DECAYED_KINDS = ("shift", "adder", "dense")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    milestones: tuple = ()
    step_factor: float = 0.1
    seed: int = 0
    adder_lr_scaling: bool = True
    adder_eta: float = 0.2
    augment: bool = False
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.base_lr >= 0:
            raise ValidationError("base_lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.lr_schedule not in ("cosine", "step", "constant"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.adder_eta <= 0:
            raise ValidationError("adder_eta must be > 0")


@dataclass(frozen=True)
class Metrics:
    epoch: int
    train_loss: float
    test_top1: float
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.test_top1 <= 100.0:
            raise ValidationError(f"test_top1 must lie in [0, 100], got {self.test_top1}")

    def log_line(self):
        """Deterministic part of the record (wall time is kept out of the log)."""
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.test_top1:.2f}"


METRICS_HEADER = "epoch\ttrain_loss\ttest_top1"


def learning_rate(config, step, steps_per_epoch):
    """Learning rate for global ``step`` (cosine decays per step to 0)."""
    if config.lr_schedule == "constant":
        return config.base_lr
    if config.lr_schedule == "step":
        epoch = step // max(steps_per_epoch, 1)
        passed = sum(1 for m in config.milestones if epoch >= m)
        return config.base_lr * config.step_factor ** passed
    total = max(config.epochs * steps_per_epoch, 1)
    return 0.5 * config.base_lr * (1.0 + math.cos(math.pi * min(step, total) / total))


def sgd_step(params, grads, state, config, lr=None, kinds=None):
    """In-place momentum SGD over parallel lists of arrays.

    ``kinds`` tags each parameter (``"shift"``, ``"adder"``, ``"dense"``,
    ``"bn"``, ``"bias"``; default ``"dense"``).  Weight decay applies to shift,
    adder and dense kinds only.  Adder gradients are first rescaled with
    :func:`adder_lr_scale` when ``config.adder_lr_scaling`` is set.  ``state``
    is a list of momentum buffers (``None`` before the first step), updated in
    place.  Returns ``(params, state)``.
    """
    lr = config.base_lr if lr is None else lr
    kinds = ["dense"] * len(params) if kinds is None else kinds
    if not (len(params) == len(grads) == len(kinds)):
        raise ValidationError("params, grads and kinds must have equal length")
    if len(state) != len(params):
        state[:] = [None] * len(params)
    for i, (p, g, kind) in enumerate(zip(params, grads, kinds)):
        if p.shape != g.shape:
            raise DimensionError(f"param {i}: shape {p.shape} but grad {g.shape}", axis=i)
        d = g
        if kind == "adder" and config.adder_lr_scaling:
            d = adder_lr_scale(g, config.adder_eta)
        if kind in DECAYED_KINDS and config.weight_decay:
            d = d + config.weight_decay * p
        if config.momentum:
            buf = state[i]
            if buf is None:
                buf = state[i] = np.array(d, dtype=p.dtype)
            else:
                buf *= config.momentum
                buf += d
            d = buf
        p -= (lr * d).astype(p.dtype, copy=False)
    return params, state


class SGD:
    """Stateful wrapper binding :func:`sgd_step` to a model's parameters."""

    def __init__(self, model, config):
        named = list(model.named_parameters())
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.kinds = [p.kind for p in self.params]
        self.config = config
        self.state = [None] * len(self.params)

    def step(self, lr):
        sgd_step([p.value for p in self.params], [p.grad for p in self.params], self.state,
                 self.config, lr=lr, kinds=self.kinds)


def _forward_eval(model, x):
    if hasattr(model, "predict_logits"):
        return model.predict_logits(x)
    return model.forward(x, training=False)


def evaluate(model, dataset, batch_size=500):
    """Top-1 accuracy in percent, with BN in inference mode."""
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    correct = 0
    for x, y in iterate_batches(dataset, batch_size):
        correct += int(np.count_nonzero(np.argmax(_forward_eval(model, x), axis=1) == y))
    return 100.0 * correct / len(dataset)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_top1: float = -1.0
    best_epoch: int = 0


def train(model, train_set, test_set, config, checkpoint_path=None, metrics_path=None,
          timing_path=None, progress=None):
    """Run ``config.epochs`` epochs and return a :class:`TrainResult`.

    Shuffling and augmentation draw from ``default_rng(config.seed)``, so a
    fixed seed and a fixed model init give bit-identical runs.  After every
    epoch the test top-1 is measured; the best epoch's weights go to
    ``checkpoint_path``.  ``metrics_path`` receives a tab-separated log of
    ``epoch, train_loss, test_top1``; per-epoch wall time is written to
    ``timing_path`` (and reported via ``progress``) since it is not reproducible.
    Without a test split, accuracy is measured on the training split.
    """
    if test_set is None:
        test_set = train_set
    classes = model.spec.classes
    for ds in (train_set, test_set):
        if ds.classes != classes:
            raise ValidationError(
                f"dataset {ds.split!r} has {ds.classes} classes, model predicts {classes}"
            )
        if ds.images.shape[1:] != tuple(model.input_shape):
            raise ValidationError(
                f"dataset {ds.split!r} images are {ds.images.shape[1:]}, model expects {model.input_shape}"
            )
    rng = np.random.default_rng(config.seed)
    opt = SGD(model, config)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    augment = random_crop_flip if config.augment else None
    result = TrainResult()
    metrics_fh = _open_log(metrics_path, METRICS_HEADER)
    timing_fh = _open_log(timing_path, "epoch\twall_time_s")
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            total, seen = 0.0, 0
            for x, y in iterate_batches(train_set, config.batch_size, rng, augment):
                loss, _ = loss_and_gradients(model, x, y, training=True)
                opt.step(learning_rate(config, step, steps_per_epoch))
                step += 1
                total += loss * len(y)
                seen += len(y)
            top1 = evaluate(model, test_set, config.eval_batch_size)
            m = Metrics(epoch, total / seen, top1, time.perf_counter() - t0)
            result.history.append(m)
            if top1 > result.best_top1:
                result.best_top1, result.best_epoch = top1, epoch
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
            if metrics_fh:
                metrics_fh.write(m.log_line() + "\n")
                metrics_fh.flush()
            if timing_fh:
                timing_fh.write(f"{epoch}\t{m.wall_time_s:.3f}\n")
                timing_fh.flush()
            if progress is not None:
                progress(m)
    finally:
        for fh in (metrics_fh, timing_fh):
            if fh:
                fh.close()
    return result


def _open_log(path, header):
    if path is None:
        return None
    fh = open(Path(path), "w", encoding="utf-8")
    fh.write(header + "\n")
    return fh
