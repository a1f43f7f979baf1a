"""Large-window Mamba scale (LMS) decoder blocks.

PiM scans the pixels of each m x n window as a token sequence; PaM average-
pools every window to one token, scans the window grid and unpools. Both are
wrapped as ``out = BiMamba(norm(x)) + scale * x``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_ops
from .encoder import ResidualBlock
from .errors import ShapeError
from .layers import Conv2d, LayerNorm, Module
from .ssm import BiMamba
from .tensor import Tensor, _make, concat, get_dtype, pad, parameter, reshape, transpose


@dataclass(frozen=True)
class WindowLayout:
    n: int
    c: int
    h: int
    w: int
    m: int
    n_w: int  # window width
    hp: int
    wp: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.hp // self.m, self.wp // self.n_w


def effective_window(h: int, w: int, m: int, n: int) -> tuple[int, int]:
    """Windows larger than the map shrink to the map."""
    return min(m, h), min(n, w)


def _layout(x: Tensor, m: int, n: int) -> WindowLayout:
    b, c, h, w = x.shape
    hp = -(-h // m) * m
    wp = -(-w // n) * n
    return WindowLayout(b, c, h, w, m, n, hp, wp)


def _pad_to(x: Tensor, lay: WindowLayout) -> Tensor:
    return pad(x, ((0, 0), (0, 0), (0, lay.hp - lay.h), (0, lay.wp - lay.w)))


def _crop(x: Tensor, lay: WindowLayout) -> Tensor:
    if (lay.hp, lay.wp) == (lay.h, lay.w):
        return x
    return x[:, :, :lay.h, :lay.w]


def _to_windows(a: np.ndarray, lay: WindowLayout) -> np.ndarray:
    gh, gw = lay.grid
    a = a.reshape(lay.n, lay.c, gh, lay.m, gw, lay.n_w).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(a).reshape(lay.n * gh * gw, lay.m * lay.n_w, lay.c)


def _from_windows(a: np.ndarray, lay: WindowLayout) -> np.ndarray:
    gh, gw = lay.grid
    a = a.reshape(lay.n, gh, gw, lay.m, lay.n_w, lay.c).transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(a).reshape(lay.n, lay.c, lay.hp, lay.wp)


def window_partition(x: Tensor, m: int, n: int) -> tuple[Tensor, WindowLayout]:
    """N x C x H x W -> (N * windows) x (m * n) x C, tokens row-major per window.

    Extents that are not multiples of the window are zero-padded; the layout
    records what :func:`window_merge` must crop.
    """
    if x.ndim != 4:
        raise ShapeError(f"window_partition expects N x C x H x W, got {x.shape}")
    lay = _layout(x, m, n)
    xp = _pad_to(x, lay)
    out = _to_windows(xp.data, lay)
    seq = _make(out, (xp,), lambda g: (_from_windows(g, lay),), "window_partition")
    return seq, lay


def window_merge(seq: Tensor, lay: WindowLayout) -> Tensor:
    gh, gw = lay.grid
    expected = (lay.n * gh * gw, lay.m * lay.n_w, lay.c)
    if seq.shape != expected:
        raise ShapeError(f"window_merge expects {expected}, got {seq.shape}")
    full = _make(_from_windows(seq.data, lay), (seq,), lambda g: (_to_windows(g, lay),),
                 "window_merge")
    return _crop(full, lay)


def _scale_param(value: float = 1.0) -> Tensor:
    return parameter(np.full((1, 1, 1, 1), value, dtype=get_dtype()))


class PiM(Module):
    """Pixel-level scan inside every window."""

    def __init__(self, c: int, window: tuple[int, int], rng: np.random.Generator, **mamba_kw):
        self.window = tuple(window)
        self.norm = LayerNorm(c)
        self.mamba = BiMamba(c, rng, **mamba_kw)
        self.scale = _scale_param()

    def forward(self, x: Tensor) -> Tensor:
        m, n = effective_window(x.shape[2], x.shape[3], *self.window)
        seq, lay = window_partition(x, m, n)
        mixed = window_merge(self.mamba(self.norm(seq)), lay)
        return mixed + x * self.scale


class PaM(Module):
    """Patch-level scan over the grid of pooled windows."""

    def __init__(self, c: int, window: tuple[int, int], rng: np.random.Generator, **mamba_kw):
        self.window = tuple(window)
        self.norm = LayerNorm(c)
        self.mamba = BiMamba(c, rng, **mamba_kw)
        self.scale = _scale_param()

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        m, n = effective_window(h, w, *self.window)
        lay = _layout(x, m, n)
        pooled = nn_ops.avg_pool(_pad_to(x, lay), m, n)  # N C gh gw
        gh, gw = pooled.shape[2:]
        tokens = transpose(reshape(pooled, (b, c, gh * gw)), (0, 2, 1))  # N L C
        mixed = self.mamba(self.norm(tokens))
        grid = reshape(transpose(mixed, (0, 2, 1)), (b, c, gh, gw))
        up = _crop(nn_ops.unpool(grid, m, n), lay)
        return up + x * self.scale


class ConvMixer(Module):
    """Width-matched residual conv block used when the LMS mixers are ablated."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.block = ResidualBlock(c, c, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(x)


class LmsBlock(Module):
    """PiM -> PaM, then (optionally) 2x upsample, 1x1 halving conv and skip fusion.

    ``skip_channels=None`` builds a terminal block that keeps resolution and
    width (no upsampling, no skip).
    """

    def __init__(self, c_in: int, skip_channels: int | None, window: tuple[int, int],
                 rng: np.random.Generator, use_lms: bool = True, **mamba_kw):
        self.c_in = c_in
        self.use_lms = use_lms
        if use_lms:
            self.pim = PiM(c_in, window, rng, **mamba_kw)
            self.pam = PaM(c_in, window, rng, **mamba_kw)
        else:
            self.mixer = ConvMixer(c_in, rng)
        self.skip_channels = skip_channels
        if skip_channels is not None:
            self.up_conv = Conv2d(c_in, c_in // 2, 1, rng)
            self.fuse_conv = Conv2d(c_in // 2 + skip_channels, skip_channels, 1, rng)

    @property
    def out_channels(self) -> int:
        return self.c_in if self.skip_channels is None else self.skip_channels

    def mix(self, x: Tensor) -> Tensor:
        if self.use_lms:
            return self.pam(self.pim(x))
        return self.mixer(x)

    def forward(self, x: Tensor, skip: Tensor | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"LMS block expects {self.c_in} channels, got shape {x.shape}")
        mixed = self.mix(x)
        if self.skip_channels is None:
            return mixed
        if skip is None or skip.shape[2:] != (2 * x.shape[2], 2 * x.shape[3]) \
                or skip.shape[1] != self.skip_channels:
            got = None if skip is None else skip.shape
            raise ShapeError(
                f"skip feature must be N x {self.skip_channels} x {2 * x.shape[2]} x {2 * x.shape[3]}, "
                f"got {got}"
            )
        up = self.up_conv(nn_ops.upsample_bilinear(mixed, 2))
        return self.fuse_conv(concat([up, skip], axis=1))
