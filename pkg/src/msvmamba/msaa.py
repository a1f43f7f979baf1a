"""Multiscale attention aggregation over three decoder stages."""
from __future__ import annotations

import numpy as np

from . import nn_ops
from .errors import ShapeError
from .layers import Conv2d, Linear, Module
from .tensor import Tensor, add, concat, expand, relu, reshape, sigmoid, tmax

POOL_MODES = ("local", "channel")


def align_and_concat(center: Tensor, lower: Tensor, upper: Tensor) -> Tensor:
    """Resample both neighbours to the centre's resolution and stack channels
    in the order (centre, lower, upper)."""
    for t in (center, lower, upper):
        if t.ndim != 4:
            raise ShapeError(f"stage features must be N x C x H x W, got {t.shape}")
    h, w = center.shape[2:]
    return concat([center, nn_ops.resize_bilinear(lower, h, w),
                   nn_ops.resize_bilinear(upper, h, w)], axis=1)


class MSAA(Module):
    def __init__(self, c1: int, c_out: int, rng: np.random.Generator, reduction: int = 4,
                 pool_mode: str = "local"):
        if pool_mode not in POOL_MODES:
            raise ValueError(f"pool_mode must be one of {POOL_MODES}, got {pool_mode!r}")
        c2 = max(c1 // reduction, 1)
        self.c1, self.c2, self.pool_mode = c1, c2, pool_mode
        self.reduce = Conv2d(c1, c2, 1, rng)
        self.k3 = Conv2d(c2, c2, 3, rng)
        self.k5 = Conv2d(c2, c2, 5, rng)
        self.k7 = Conv2d(c2, c2, 7, rng)
        self.spatial_conv7 = Conv2d(c2 if pool_mode == "local" else 1, c2, 7, rng)
        self.channel_conv = Conv2d(c1, c2, 1, rng)
        self.fc = Linear(c2, c2, rng)
        self.out_proj = Conv2d(c2, c_out, 1, rng)

    def _check(self, f_hat: Tensor) -> None:
        if f_hat.ndim != 4 or f_hat.shape[1] != self.c1:
            raise ShapeError(f"MSAA expects {self.c1} concatenated channels, got shape {f_hat.shape}")

    def multiscale(self, f_hat: Tensor) -> Tensor:
        f1 = self.reduce(f_hat)
        return add(add(self.k3(f1), self.k5(f1)), self.k7(f1))

    def spatial_path(self, f_hat: Tensor) -> Tensor:
        self._check(f_hat)
        f2 = self.multiscale(f_hat)
        if self.pool_mode == "local":
            pooled = nn_ops.pool2x2_same(f2, "avg") + nn_ops.pool2x2_same(f2, "max")
        else:
            pooled = f2.mean(axis=1, keepdims=True) + tmax(f2, axis=1, keepdims=True)
        return self.spatial_conv7(pooled) * sigmoid(f2)

    def channel_path(self, f_hat: Tensor) -> Tensor:
        self._check(f_hat)
        n, _, h, w = f_hat.shape
        f3 = nn_ops.global_avg_pool(f_hat) + nn_ops.global_max_pool(f_hat)
        a = relu(self.channel_conv(f3))
        a = sigmoid(self.fc(reshape(a, (n, self.c2))))
        return expand(reshape(a, (n, self.c2, 1, 1)), (n, self.c2, h, w))

    def fuse(self, f_spatial: Tensor, f_channel: Tensor) -> Tensor:
        return self.out_proj(f_spatial * f_channel)

    def forward(self, center: Tensor, lower: Tensor, upper: Tensor) -> Tensor:
        f_hat = align_and_concat(center, lower, upper)
        return self.fuse(self.spatial_path(f_hat), self.channel_path(f_hat))
