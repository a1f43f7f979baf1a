"""Layer kernels (forward + backward) on N x C x H x W tensors."""
from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, ShapeError
from .tensor import Tensor, _make, _sigmoid_np, reshape, matmul

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an N x C x H x W tensor, got shape {x.shape}")


def _wide(dtype):
    # accumulator wide enough to hold sums of up to ~2**10 terms of `dtype` exactly
    return np.float64 if dtype == np.float32 else np.longdouble


# -- convolution -----------------------------------------------------------

def im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def col2im(gcols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = padded_shape[:2]
    g6 = gcols.reshape(n, ho, wo, c, k, k)
    out = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """Cross-correlation via im2col + matmul. ``padding=None`` means k // 2."""
    _check_4d(x, "conv2d")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"square kernels only, got {weight.shape}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    p = k // 2 if padding is None else padding
    xd, wd = x.data, weight.data
    n = xd.shape[0]
    wmat = wd.reshape(c_out, -1)

    if k == 1 and stride == 1 and p == 0:
        h, w = xd.shape[2:]
        cols = xd.transpose(0, 2, 3, 1).reshape(-1, c_in)
        ho, wo, padded_shape = h, w, None
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        padded_shape = xp.shape
        cols, ho, wo = im2col(xp, k, stride)
    out = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(wd.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            if padded_shape is None:
                gx = gcols.reshape(n, ho, wo, c_in).transpose(0, 3, 1, 2)
            else:
                gxp = col2im(gcols, padded_shape, k, stride, ho, wo)
                gx = gxp[:, :, p:p + xd.shape[2], p:p + xd.shape[3]] if p else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw, "conv2d")


# -- normalisation ---------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
              eps: float = BN_EPS) -> Tensor:
    """Batch normalisation over (N, H, W) per channel.

    In training mode the running statistics arrays are updated in place.
    """
    _check_4d(x, "batchnorm")
    n, c, h, w = x.shape
    if gamma.shape[0] != c:
        raise ShapeError(f"batchnorm has {gamma.shape[0]} channels, input has {c}")
    m = n * h * w
    if m == 0:
        raise ContractViolation("batchnorm on an empty batch")
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.reshape(1, c, 1, 1)
    out = gd * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            gx = inv / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batchnorm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (channels of a token sequence)."""
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        gx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "layer_norm")


# -- pooling -----------------------------------------------------------------

def _check_divisible(x: Tensor, m: int, n: int) -> None:
    h, w = x.shape[2:]
    if h % m or w % n:
        raise ShapeError(
            f"pooling window {m}x{n} does not divide spatial extents {h}x{w}; pad the input first"
        )


def avg_pool(x: Tensor, m: int, n: int | None = None) -> Tensor:
    """Non-overlapping average pooling (stride = window)."""
    n = m if n is None else n
    _check_4d(x, "avg_pool")
    _check_divisible(x, m, n)
    b, c, h, w = x.shape
    xd = x.data
    blocks = xd.reshape(b, c, h // m, m, w // n, n)
    out = (blocks.sum(axis=(3, 5), dtype=_wide(xd.dtype)) / (m * n)).astype(xd.dtype)

    def bw(g):
        gx = np.repeat(np.repeat(g / xd.dtype.type(m * n), m, axis=2), n, axis=3)
        return (gx,)

    return _make(out, (x,), bw, "avg_pool")


def max_pool(x: Tensor, m: int, n: int | None = None) -> Tensor:
    """Non-overlapping max pooling; ties go to the first row-major index."""
    n = m if n is None else n
    _check_4d(x, "max_pool")
    _check_divisible(x, m, n)
    b, c, h, w = x.shape
    hm, wn = h // m, w // n
    win = x.data.reshape(b, c, hm, m, wn, n).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hm, wn, m * n)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, hm, wn, m, n).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return _make(out, (x,), bw, "max_pool")


def unpool(y: Tensor, m: int, n: int | None = None) -> Tensor:
    """Nearest replication of every value over an m x n block."""
    n = m if n is None else n
    _check_4d(y, "unpool")
    out = np.repeat(np.repeat(y.data, m, axis=2), n, axis=3)
    b, c, h, w = y.shape

    def bw(g):
        return (g.reshape(b, c, h, m, w, n).sum(axis=(3, 5)),)

    return _make(out, (y,), bw, "unpool")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    h, w = x.shape[2:]
    xd = x.data
    out = (xd.sum(axis=(2, 3), keepdims=True, dtype=_wide(xd.dtype)) / (h * w)).astype(xd.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / xd.dtype.type(h * w), xd.shape).copy(),),
                 "global_avg_pool")


def global_max_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_max_pool")
    b, c, h, w = x.shape
    flat = x.data.reshape(b, c, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(b, c, 1, 1)

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g.reshape(b, c, 1), axis=-1)
        return (gf.reshape(b, c, h, w),)

    return _make(out, (x,), bw, "global_max_pool")


def pool2x2_same(x: Tensor, mode: str) -> Tensor:
    """2x2 window, stride 1, output keeps H x W (last row/column edge-replicated)."""
    _check_4d(x, "pool2x2_same")
    b, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 1), (0, 1)), mode="edge")
    offsets = ((0, 0), (0, 1), (1, 0), (1, 1))
    views = np.stack([xp[:, :, i:i + h, j:j + w] for i, j in offsets], axis=-1)

    if mode == "avg":
        out = views.mean(axis=-1).astype(x.dtype)
        coef = None
    elif mode == "max":
        idx = views.argmax(axis=-1)
        out = np.take_along_axis(views, idx[..., None], axis=-1)[..., 0]
        coef = idx
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k, (i, j) in enumerate(offsets):
            part = g / 4 if coef is None else g * (coef == k)
            gxp[:, :, i:i + h, j:j + w] += part
        gx = gxp[:, :, :h, :w].copy()
        gx[:, :, h - 1, :] += gxp[:, :, h, :w]
        gx[:, :, :, w - 1] += gxp[:, :, :h, w]
        gx[:, :, h - 1, w - 1] += gxp[:, :, h, w]
        return (gx,)

    return _make(out, (x,), bw, f"{mode}_pool2x2_same")


# -- resampling ------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the linear-interpolation weights of output sample i
    (half-pixel centres, i.e. align_corners=False)."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    return mat.astype(dtype)


def _apply_separable(x: np.ndarray, rh: np.ndarray, rw: np.ndarray) -> np.ndarray:
    """rh @ x @ rw.T over the trailing two axes, as two plain GEMMs."""
    n, c, h, w = x.shape
    oh, ow = rh.shape[0], rw.shape[0]
    t = (x.reshape(n * c * h, w) @ rw.T).reshape(n * c, h, ow)
    t = t.transpose(1, 0, 2).reshape(h, n * c * ow)
    out = (rh @ t).reshape(oh, n * c, ow).transpose(1, 0, 2)
    return np.ascontiguousarray(out).reshape(n, c, oh, ow)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_4d(x, "resize_bilinear")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    rh = _interp_matrix(h, out_h, x.dtype)
    rw = _interp_matrix(w, out_w, x.dtype)
    out = _apply_separable(x.data, rh, rw)
    return _make(out, (x,), lambda g: (_apply_separable(g, rh.T, rw.T),), "resize_bilinear")


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    _check_4d(x, "upsample_bilinear")
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


# -- misc ------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ weight (+ bias)`` over the last axis of x (weight is D_in x D_out)."""
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        out = out + reshape(bias, (1, -1))
    return reshape(out, lead + (weight.shape[1],))


def causal_depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution along L for x of shape B x L x D, weight D x K."""
    b, length, d = x.shape
    k = weight.shape[1]
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (k - 1, 0), (0, 0)))
    out = np.zeros_like(xd) + bias.data
    for j in range(k):
        out += xp[:, j:j + length, :] * wd[:, j]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for j in range(k):
            gxp[:, j:j + length, :] += g * wd[:, j]
            gw[:, j] = (g * xp[:, j:j + length, :]).sum(axis=(0, 1))
        return gxp[:, k - 1:, :], gw, g.sum(axis=(0, 1))

    return _make(out, (x, weight, bias), bw, "causal_conv1d")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return _sigmoid_np(x)
