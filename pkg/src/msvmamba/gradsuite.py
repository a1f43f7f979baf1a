"""Finite-difference gradient checks for every parameterised operation.

Each case builds a small problem from a seed and returns the function under
test plus the tensors whose gradients are compared (inputs and parameters).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn_ops
from .encoder import ResidualBlock
from .gradcheck import check_gradients
from .layers import BatchNorm2d, Module
from .lms import LmsBlock
from .losses import (LossConfig, PredictionSet, binary_cross_entropy, cross_entropy,
                     dice_loss, total_loss)
from .msaa import MSAA
from .ssm import BiMamba, SsmParams, selective_scan
from .tensor import Tensor, get_dtype, parameter, precision

TOLERANCE = {np.float32: 1e-3, np.float64: 1e-5}
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
STEP = 1e-3
# ReLU kinks sit close to the sample points here; gradients are O(1) so a small step is safe
STEP_OVERRIDE = {"residual_block": 1e-6}


def _param(rng, *shape, std=1.0):
    return parameter((rng.standard_normal(shape) * std).astype(get_dtype()))


def _distinct(rng, *shape):
    """Values spaced >= 1/size apart so max-selections have no near ties."""
    size = int(np.prod(shape))
    return parameter((rng.permutation(size).reshape(shape) / size * 4 - 2).astype(get_dtype()))


def _with_module(module: Module, inputs: dict) -> dict:
    out = dict(inputs)
    out.update(module.named_parameters())
    return out


def _excite_scans(module: Module, rng) -> None:
    """Move scan parameters off their init point.

    At init the step sizes are tiny, so A barely influences the output and its
    gradients sink below finite-difference rounding noise.
    """
    for m in module.modules():
        if isinstance(m, SsmParams):
            m.b_dt.data[...] = rng.uniform(-1.0, 1.0, m.b_dt.shape)
            m.W_B.data[...] = rng.standard_normal(m.W_B.shape) * 0.5
            m.W_C.data[...] = rng.standard_normal(m.W_C.shape) * 0.5


def case_conv2d(rng):
    x = _param(rng, 2, 3, 6, 6)
    out = {}
    for k, stride in ((3, 1), (5, 2), (1, 1)):
        w = _param(rng, 4, 3, k, k, std=0.3)
        b = _param(rng, 4)
        out[f"k{k}s{stride}"] = (lambda x=x, w=w, b=b, s=stride: nn_ops.conv2d(x, w, b, stride=s),
                                 {"x": x, "w": w, "b": b})
    return out


def case_batchnorm(rng):
    x = _param(rng, 4, 3, 3, 3)
    bn = BatchNorm2d(3)
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[...] = rng.standard_normal(3)
    return {"train": (lambda: bn(x), _with_module(bn, {"x": x}))}


def case_pooling(rng):
    x = _distinct(rng, 2, 2, 6, 6)
    y = _param(rng, 2, 2, 3, 2)
    xs = _distinct(rng, 1, 2, 5, 7)
    return {
        "avg": (lambda: nn_ops.avg_pool(x, 2, 3), {"x": x}),
        "max": (lambda: nn_ops.max_pool(x, 3, 2), {"x": x}),
        "unpool": (lambda: nn_ops.unpool(y, 2, 3), {"y": y}),
        "global": (lambda: nn_ops.global_avg_pool(x) + nn_ops.global_max_pool(x), {"x": x}),
        "same_avg": (lambda: nn_ops.pool2x2_same(xs, "avg"), {"x": xs}),
        "same_max": (lambda: nn_ops.pool2x2_same(xs, "max"), {"x": xs}),
    }


def case_upsample(rng):
    x = _param(rng, 2, 2, 3, 4)
    return {
        "x2": (lambda: nn_ops.upsample_bilinear(x, 2), {"x": x}),
        "resize": (lambda: nn_ops.resize_bilinear(x, 7, 5), {"x": x}),
    }


def case_selective_scan(rng):
    p = SsmParams(3, 4, rng)
    _excite_scans(p, rng)
    x = _param(rng, 2, 6, 3)
    return {
        "forward": (lambda: selective_scan(x, p), _with_module(p, {"x": x})),
        "reverse": (lambda: selective_scan(x, p, reverse=True), _with_module(p, {"x": x})),
    }


def case_bimamba(rng):
    blk = BiMamba(3, rng, d_state=4, expand=2)
    _excite_scans(blk, rng)
    x = _param(rng, 2, 5, 3)
    return {"block": (lambda: blk(x), _with_module(blk, {"x": x}))}


def case_residual_block(rng):
    blk = ResidualBlock(2, 3, rng, stride=2)
    x = _param(rng, 2, 2, 6, 6)
    return {"stride2": (lambda: blk(x), _with_module(blk, {"x": x}))}


def case_lms_block(rng):
    blk = LmsBlock(4, 2, (4, 4), rng, d_state=4, expand=1)
    _excite_scans(blk, rng)
    x = _param(rng, 1, 4, 8, 8)
    skip = _param(rng, 1, 2, 16, 16)
    return {"window4": (lambda: blk(x, skip), _with_module(blk, {"x": x, "skip": skip}))}


def case_msaa(rng):
    m = MSAA(8, 3, rng, reduction=4)
    center = _distinct(rng, 1, 4, 4, 4)
    lower = _distinct(rng, 1, 2, 2, 2)
    upper = _distinct(rng, 1, 2, 8, 8)
    return {"local": (lambda: m(center, lower, upper),
                      _with_module(m, {"center": center, "lower": lower, "upper": upper}))}


def case_losses(rng):
    logits = _param(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 3, (2, 4, 4))
    blog = _param(rng, 2, 1, 4, 4)
    blab = rng.integers(0, 2, (2, 4, 4))
    aux = [_param(rng, 2, 3, 4, 4) for _ in range(4)]
    raw = _param(rng, 4)

    def total():
        preds = PredictionSet(logits, aux)
        return total_loss(preds, labels, LossConfig(epsilon=0.4), raw).total

    ins = {"logits": logits, "raw_omega": raw}
    ins.update({f"aux{i}": a for i, a in enumerate(aux)})
    return {
        "xce": (lambda: cross_entropy(logits, labels), {"logits": logits}),
        "bce": (lambda: binary_cross_entropy(blog, blab), {"logits": blog}),
        "dice": (lambda: dice_loss(logits, labels), {"logits": logits}),
        "dice_binary": (lambda: dice_loss(blog, blab, task="binary"), {"logits": blog}),
        "total": (total, ins),
    }


CASES: dict[str, Callable] = {
    "conv2d": case_conv2d,
    "batchnorm": case_batchnorm,
    "pooling": case_pooling,
    "upsample": case_upsample,
    "selective_scan": case_selective_scan,
    "bimamba": case_bimamba,
    "residual_block": case_residual_block,
    "lms_block": case_lms_block,
    "msaa": case_msaa,
    "losses": case_losses,
}


@dataclass
class CaseResult:
    op: str
    variant: str
    seed: int
    worst_input: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run_suite(dtype=np.float32, seeds=DEFAULT_SEEDS, ops=None, max_probes: int = 6,
              log: Callable[[str], None] | None = None) -> list[CaseResult]:
    dtype = np.dtype(dtype).type
    tol = TOLERANCE[dtype]
    results = []
    for op in ops or CASES:
        t0 = time.perf_counter()
        for seed in seeds:
            rng = np.random.default_rng([seed, 101])
            with precision(dtype):
                variants = CASES[op](rng)
            for name, (fn, inputs) in variants.items():
                with precision(dtype):
                    errs = check_gradients(fn, inputs, seed=seed, h=STEP_OVERRIDE.get(op, STEP), max_probes=max_probes)
                worst = max(errs, key=errs.get)
                results.append(CaseResult(op, name, seed, worst, errs[worst], tol))
        if log:
            mine = [r for r in results if r.op == op]
            worst = max(mine, key=lambda r: r.error)
            log(f"{op:15s} {'ok  ' if all(r.passed for r in mine) else 'FAIL'} "
                f"max rel err {worst.error:.2e} ({worst.variant}/{worst.worst_input}, seed {worst.seed}) "
                f"{time.perf_counter() - t0:.1f}s")
    return results
