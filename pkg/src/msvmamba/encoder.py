"""Residual encoder: four stride-2 stages producing the decoder's skip features."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import Tensor, relu

DEFAULT_CHANNELS = (32, 64, 128, 256)


class ResidualBlock(Module):
    """ReLU(BN(conv3x3(ReLU(BN(conv3x3(x))))) + skip(x)).

    The skip is a 1x1 (strided) projection when channels or resolution change,
    otherwise the identity.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(c_out)
        self.proj = Conv2d(c_in, c_out, 1, rng, stride=stride) if (c_in != c_out or stride != 1) else None
        self.c_in = c_in

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"residual block expects {self.c_in} input channels, got shape {x.shape}")
        h = relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.proj is None else self.proj(x)
        return relu(h + skip)


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, channels=DEFAULT_CHANNELS, in_channels: int = 1):
        self.channels = tuple(channels)
        widths = (in_channels,) + self.channels
        self.stages = [ResidualBlock(widths[i], widths[i + 1], rng, stride=2)
                       for i in range(len(self.channels))]

    def forward(self, image: Tensor) -> list[Tensor]:
        factor = 2 ** len(self.stages)
        if image.ndim != 4 or image.shape[2] % factor or image.shape[3] % factor:
            raise ShapeError(
                f"encoder input must be N x C x H x W with H, W divisible by {factor}, got {image.shape}"
            )
        feats, x = [], image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
