"""Prediction heads and the hierarchical training objective.

total = L_main + epsilon * sum_i omega_i * L_aux_i, with omega = softmax(raw_omega),
L_main a weighted mix of cross-entropy and soft Dice on the main logits, and
L_aux_i the cross-entropy of the i-th auxiliary head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_ops
from .errors import ConfigError, DataError, ShapeError
from .layers import Conv2d, Module
from .tensor import Tensor, _make, _sigmoid_np, add, mul, scale, sigmoid, stack_scalars, tsum

TASKS = ("binary", "multiclass")


def task_for(classes: int) -> str:
    return "binary" if classes == 1 else "multiclass"


@dataclass
class PredictionSet:
    logits_main: Tensor
    logits_aux: list[Tensor] = field(default_factory=list)

    @property
    def classes(self) -> int:
        return self.logits_main.shape[1]


@dataclass
class LossConfig:
    epsilon: float = 0.4
    task: str = "multiclass"
    dice_smooth: float = 1.0
    main_mix: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass
class LossOutput:
    total: Tensor
    l_main: float
    l_aux: list[float]
    omega_snapshot: list[float]
    epsilon: float

    @property
    def aux_contribution(self) -> float:
        """epsilon * sum_i omega_i * L_aux_i as plain float."""
        return self.epsilon * float(np.dot(self.omega_snapshot, self.l_aux)) if self.l_aux else 0.0


class AuxHead(Module):
    """1x1 conv to class logits, resized to label resolution."""

    def __init__(self, c_in: int, classes: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, classes, 1, rng)

    def forward(self, feat: Tensor, out_hw: tuple[int, int]) -> Tensor:
        return nn_ops.resize_bilinear(self.conv(feat), *out_hw)


def _check_labels(logits: Tensor, labels: np.ndarray, task: str) -> np.ndarray:
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    limit = 2 if task == "binary" else c
    if task == "binary" and c != 1:
        raise ShapeError(f"binary task expects 1 logit channel, got {c}")
    bad = np.argwhere((labels < 0) | (labels >= limit))
    if bad.size:
        b, y, x = bad[0]
        raise DataError(f"label value {labels[b, y, x]} at sample {b}, pixel (row {y}, col {x}) "
                        f"is outside [0, {limit - 1}]")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over all pixels (labels: N x H x W ints)."""
    labels = _check_labels(logits, labels, "multiclass")
    x = logits.data
    mx = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - mx).sum(axis=1, keepdims=True)) + mx
    picked = np.take_along_axis(x, labels[:, None], axis=1)
    count = labels.size
    loss = np.asarray((lse - picked).sum() / count, dtype=x.dtype)

    def bw(g):
        grad = np.exp(x - lse)
        np.put_along_axis(grad, labels[:, None],
                          np.take_along_axis(grad, labels[:, None], axis=1) - 1, axis=1)
        return (grad * (g / count),)

    return _make(loss, (logits,), bw, "cross_entropy")


def binary_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean sigmoid cross-entropy (logits: N x 1 x H x W, labels in {0, 1})."""
    labels = _check_labels(logits, labels, "binary")
    z = logits.data
    y = labels[:, None].astype(z.dtype)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = labels.size
    loss = np.asarray(per.sum() / count, dtype=z.dtype)

    def bw(g):
        return ((_sigmoid_np(z) - y) * (g / count),)

    return _make(loss, (logits,), bw, "binary_cross_entropy")


def xce_loss(logits: Tensor, labels: np.ndarray, task: str) -> Tensor:
    if task == "binary":
        return binary_cross_entropy(logits, labels)
    if task == "multiclass":
        return cross_entropy(logits, labels)
    raise ConfigError(f"unknown task {task!r}")


def probabilities(logits: Tensor, task: str) -> Tensor:
    return sigmoid(logits) if task == "binary" else nn_ops.softmax(logits, axis=1)


def foreground_onehot(labels: np.ndarray, classes: int, task: str, dtype) -> tuple[np.ndarray, list[int]]:
    """One-hot targets for the probability channels that count as foreground."""
    if task == "binary":
        return (labels[:, None] == 1).astype(dtype), [0]
    chans = list(range(1, classes)) if classes > 1 else [0]
    onehot = np.stack([labels == c for c in range(classes)], axis=1).astype(dtype)
    return onehot, chans


def soft_dice(probs: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p g) + s) / (sum p + sum g + s) per channel, averaged over channels."""
    axes = (0, 2, 3)
    t = Tensor(target, dtype=probs.dtype)
    inter = tsum(mul(probs, t), axes)
    s = probs.dtype.type(smooth)
    denom = add(tsum(probs, axes), target.sum(axis=axes).astype(probs.dtype) + s)
    ratio = (scale(inter, 2.0) + s) / denom
    return 1.0 - ratio.mean()


def dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1.0,
              task: str = "multiclass") -> Tensor:
    labels = _check_labels(logits, labels, task)
    probs = probabilities(logits, task)
    onehot, chans = foreground_onehot(labels, logits.shape[1], task, logits.dtype)
    if chans != list(range(probs.shape[1])):
        probs = probs[:, chans[0]:chans[-1] + 1]
        onehot = onehot[:, chans[0]:chans[-1] + 1]
    return soft_dice(probs, onehot, smooth)


def omega(raw_omega: Tensor) -> Tensor:
    return nn_ops.softmax(raw_omega, axis=0)


def total_loss(preds: PredictionSet, labels: np.ndarray, cfg: LossConfig,
               raw_omega: Tensor | None) -> LossOutput:
    xce = xce_loss(preds.logits_main, labels, cfg.task)
    dice = dice_loss(preds.logits_main, labels, cfg.dice_smooth, cfg.task)
    w_xce, w_dice = cfg.main_mix
    l_main = add(scale(xce, w_xce), scale(dice, w_dice))
    if not preds.logits_aux:
        return LossOutput(l_main, l_main.item(), [], [], cfg.epsilon)
    if raw_omega is None or raw_omega.shape != (len(preds.logits_aux),):
        got = None if raw_omega is None else raw_omega.shape
        raise ConfigError(f"{len(preds.logits_aux)} auxiliary heads need raw_omega of shape "
                          f"({len(preds.logits_aux)},), got {got}")
    aux = [xce_loss(a, labels, cfg.task) for a in preds.logits_aux]
    w = omega(raw_omega)
    weighted = tsum(mul(w, stack_scalars(aux)))
    total = add(l_main, scale(weighted, cfg.epsilon))
    return LossOutput(total, l_main.item(), [a.item() for a in aux],
                      [float(v) for v in w.data], cfg.epsilon)
