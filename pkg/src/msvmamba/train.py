"""Optimiser, training step, evaluation metrics and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .losses import LossOutput, total_loss
from .model import MsvMamba, hard_labels
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict:
        return {"lr": self.lr, "betas": self.betas, "eps": self.eps, "t": self.t,
                "m": dict(self.m), "v": dict(self.v)}

    def load_state(self, state: dict) -> None:
        self.lr, self.betas, self.eps = state["lr"], tuple(state["betas"]), state["eps"]
        self.t = int(state["t"])
        for name, _ in self.params:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


class NonFiniteLoss(FloatingPointError):
    pass


def train_step(model: MsvMamba, images: np.ndarray, masks: np.ndarray, opt: Adam) -> LossOutput:
    """forward -> loss -> backward -> update on one batch."""
    model.train()
    opt.zero_grad()
    preds = model(Tensor(images))
    out = total_loss(preds, masks, model.cfg.loss_config(), model.raw_omega)
    if not np.isfinite(out.total.item()):
        norms = ", ".join(f"{k}={v:.4g}" for k, v in model.stage_norms.items())
        raise NonFiniteLoss(f"non-finite loss {out.total.item()}; activation norms: {norms}")
    backward(out.total)
    opt.step()
    # drop the graph so retained outputs do not pin every activation
    return replace(out, total=out.total.detach())


def grad_norm(model: MsvMamba) -> float:
    return float(np.sqrt(sum(np.sum(np.square(p.grad, dtype=np.float64))
                             for p in model.parameters() if p.grad is not None)))


def dice_coefficient(pred: np.ndarray, target: np.ndarray, cls: int) -> float:
    """Hard Dice 2|P & G| / (|P| + |G|) for one class; 1.0 when both are empty."""
    p = pred == cls
    g = target == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def foreground_classes(classes: int) -> list[int]:
    return [1] if classes <= 2 else list(range(1, classes))


@dataclass
class MetricsRow:
    step: int
    split: str
    cls: str  # class index, or "mean" over foreground classes
    dice: float
    loss_main: float
    loss_aux_sum: float
    loss_total: float
    sample: str | None = None


@dataclass
class EvalResult:
    rows: list[MetricsRow]
    per_sample: list[MetricsRow] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return next(r.dice for r in self.rows if r.cls == "mean")


def evaluate(model: MsvMamba, images: np.ndarray, masks: np.ndarray, step: int = 0,
             split: str = "val", batch_size: int = 8, sample_ids=None) -> EvalResult:
    """Per-sample and aggregate hard Dice in eval mode (running BN statistics)."""
    if len(images) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    model.eval()
    cfg = model.cfg
    classes = foreground_classes(max(cfg.classes, 2))
    loss_cfg = cfg.loss_config()
    per_sample, dices = [], []
    sums = np.zeros(3)
    sample_ids = sample_ids or [str(i) for i in range(len(images))]
    with no_grad():
        for lo in range(0, len(images), batch_size):
            img, msk = images[lo:lo + batch_size], masks[lo:lo + batch_size]
            preds = model(Tensor(img))
            out = total_loss(preds, msk, loss_cfg, model.raw_omega)
            sums += np.array([out.l_main, out.aux_contribution, out.total.item()]) * len(img)
            labels = hard_labels(preds.logits_main.data)
            for j in range(len(img)):
                d = [dice_coefficient(labels[j], msk[j], c) for c in classes]
                dices.append(d)
                for c, v in zip(classes, d):
                    per_sample.append(MetricsRow(step, split, str(c), v, out.l_main,
                                                 out.aux_contribution, out.total.item(),
                                                 sample_ids[lo + j]))
    model.train()
    dices = np.array(dices)
    lm, la, lt = sums / len(images)
    rows = [MetricsRow(step, split, str(c), float(dices[:, k].mean()), lm, la, lt)
            for k, c in enumerate(classes)]
    rows.append(MetricsRow(step, split, "mean", float(dices.mean()), lm, la, lt))
    return EvalResult(rows, per_sample)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 4
    log_every: int = 25
    data_seed: int = 0


class Trainer:
    """Owns model, optimiser and the batch-sampling RNG (everything a resume needs)."""

    def __init__(self, model: MsvMamba, images: np.ndarray, masks: np.ndarray,
                 tcfg: TrainConfig):
        self.model, self.images, self.masks, self.tcfg = model, images, masks, tcfg
        self.opt = Adam(list(model.named_parameters()), lr=tcfg.lr)
        self.rng = np.random.Generator(np.random.PCG64(tcfg.data_seed))
        self.step = 0
        self.history: list[LossOutput] = []

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.images)
        bs = min(self.tcfg.batch_size, n)
        idx = np.sort(self.rng.choice(n, bs, replace=False))
        return self.images[idx], self.masks[idx]

    def run(self, steps: int, callback=None) -> list[LossOutput]:
        outs = []
        for _ in range(steps):
            img, msk = self.next_batch()
            out = train_step(self.model, img, msk, self.opt)
            self.step += 1
            outs.append(out)
            if self.tcfg.log_every and self.step % self.tcfg.log_every == 0:
                log.info("step %d loss %.5f main %.5f aux %.5f eps %.3g", self.step,
                         out.total.item(), out.l_main, out.aux_contribution, out.epsilon)
            if callback is not None:
                callback(self, out)
        self.history.extend(outs)
        return outs
