"""Desk-scale experiments: training-set overfit and single-switch ablations."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import emit_metrics_csv, phantom_arrays
from .model import ModelConfig, MsvMamba
from .train import MetricsRow, Trainer, TrainConfig, evaluate

SMALL_CHANNELS = (8, 16, 32, 64)
ABLATIONS = {
    "full": {},
    "no_lms": {"use_lms": False},
    "no_aux": {"use_aux": False},
    "no_msaa": {"use_msaa": False},
}


@dataclass
class OverfitResult:
    steps: int
    dice: float
    seconds: float
    curve: list[tuple[int, float]] = field(default_factory=list)


def run_overfit(n_images: int = 8, max_steps: int = 500, target: float = 0.95,
                eval_every: int = 25, seed: int = 0, data_seed: int = 0,
                batch_size: int = 4) -> OverfitResult:
    """Train on ``n_images`` phantoms until the train-set Dice reaches ``target``."""
    images, masks = phantom_arrays(n_images, data_seed)
    model = MsvMamba(ModelConfig(channels=SMALL_CHANNELS, seed=seed))
    trainer = Trainer(model, images, masks, TrainConfig(batch_size=batch_size, data_seed=seed))
    t0 = time.perf_counter()
    curve = []
    dice = 0.0
    while trainer.step < max_steps:
        trainer.run(min(eval_every, max_steps - trainer.step))
        dice = evaluate(model, images, masks, trainer.step, "train").mean_dice
        curve.append((trainer.step, dice))
        if dice >= target:
            break
    return OverfitResult(trainer.step, dice, time.perf_counter() - t0, curve)


@dataclass
class AblationRun:
    name: str
    dice: float
    rows: list[MetricsRow]
    csv_path: Path | None


def run_ablations(n_train: int = 16, n_val: int = 32, steps: int = 200, seed: int = 0,
                  train_seed: int = 1000, val_seed: int = 5000, out_dir=None,
                  names=tuple(ABLATIONS)) -> dict[str, AblationRun]:
    """Same data, seed and step budget for the full model and each single-switch ablation."""
    tr_x, tr_y = phantom_arrays(n_train, train_seed)
    va_x, va_y = phantom_arrays(n_val, val_seed)
    out = {}
    for name in names:
        cfg = ModelConfig(channels=SMALL_CHANNELS, seed=seed).with_ablation(**ABLATIONS[name])
        model = MsvMamba(cfg)
        trainer = Trainer(model, tr_x, tr_y, TrainConfig(data_seed=seed))
        trainer.run(steps)
        res = evaluate(model, va_x, va_y, trainer.step, "val")
        path = None
        if out_dir is not None:
            path = Path(out_dir) / f"{name}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            emit_metrics_csv(res.rows, path)
        out[name] = AblationRun(name, res.mean_dice, res.rows, path)
    return out
