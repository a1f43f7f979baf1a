"""Selective state-space scan and the bidirectional Mamba block.

For every channel d and state s of a token sequence x (B x L x D)::

    delta_t[d] = softplus(x_t . W_dt + b_dt[d])
    h_t[d, s]  = exp(delta_t[d] A[d, s]) h_{t-1}[d, s] + delta_t[d] (x_t . W_B)[s] x_t[d]
    y_t[d]     = sum_s (x_t . W_C)[s] h_t[d, s] + D_skip[d] x_t[d]

with h_0 = 0 and A = -exp(A_log) < 0.
"""
from __future__ import annotations

import numpy as np

from . import nn_ops
from .errors import ContractViolation, ShapeError
from .layers import Linear, Module
from .tensor import Tensor, _make, _sigmoid_np, add, flip, get_dtype, parameter, silu, softplus_np, split


class SsmParams(Module):
    """Scan parameters for one direction."""

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        dt = get_dtype()
        self.d_model, self.d_state = d_model, d_state
        self.A_log = parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64),
                                              (d_model, 1))).astype(dt))
        std = 1.0 / np.sqrt(d_model)
        self.W_B = parameter((rng.standard_normal((d_model, d_state)) * std).astype(dt))
        self.W_C = parameter((rng.standard_normal((d_model, d_state)) * std).astype(dt))
        self.W_dt = parameter((rng.standard_normal((d_model, 1)) * std * 0.1).astype(dt))
        step = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_model))
        self.b_dt = parameter((step + np.log(-np.expm1(-step))).astype(dt))  # softplus^-1
        self.D_skip = parameter(np.ones(d_model, dtype=dt))

    def fields(self) -> list[Tensor]:
        return [self.A_log, self.W_B, self.W_C, self.W_dt, self.b_dt, self.D_skip]


def _scan_core(x, A_log, W_B, W_C, W_dt, b_dt, D_skip):
    """Vectorised forward over batch/channel/state; sequential over time.

    Arrays are used time-major internally (L x B x ...).
    """
    xt = np.ascontiguousarray(x.transpose(1, 0, 2))  # L B D
    A = -np.exp(A_log)  # D N
    z = xt @ W_dt + b_dt  # L B D
    delta = softplus_np(z)
    Bt = xt @ W_B  # L B N
    Ct = xt @ W_C
    dA = np.exp(delta[..., None] * A)  # L B D N
    dBx = (delta * xt)[..., None] * Bt[:, :, None, :]
    H = np.empty_like(dA)
    H[0] = dBx[0]
    for t in range(1, xt.shape[0]):
        np.multiply(dA[t], H[t - 1], out=H[t])
        H[t] += dBx[t]
    y = np.einsum("lbdn,lbn->lbd", H, Ct) + D_skip * xt
    cache = (xt, A, z, delta, Bt, Ct, dA, H)
    return y.transpose(1, 0, 2), cache


def _scan_backward(gy, cache, A_log, W_B, W_C, W_dt, D_skip):
    xt, A, z, delta, Bt, Ct, dA, H = cache
    g = np.ascontiguousarray(gy.transpose(1, 0, 2))  # L B D
    L = xt.shape[0]
    gC = np.einsum("lbdn,lbd->lbn", H, g)
    gH = g[..., None] * Ct[:, :, None, :]
    # adjoint recurrence: lambda_t = gH_t + dA_{t+1} lambda_{t+1}
    lam = gH
    for t in range(L - 2, -1, -1):
        lam[t] += dA[t + 1] * lam[t + 1]
    g_dA = np.empty_like(lam)  # gradient w.r.t. (delta * A) through exp
    g_dA[0] = 0
    np.multiply(lam[1:], H[:-1], out=g_dA[1:])
    g_dA *= dA
    g_delta = np.einsum("lbdn,dn->lbd", g_dA, A)
    gA = np.einsum("lbdn,lbd->dn", g_dA, delta)
    lamB = np.einsum("lbdn,lbn->lbd", lam, Bt)
    g_delta += lamB * xt
    gx = lamB * delta
    gB = np.einsum("lbdn,lbd->lbn", lam, delta * xt)
    gx += g * D_skip
    gD = (g * xt).sum(axis=(0, 1))
    gz = g_delta * _sigmoid_np(z)
    gb = gz.sum(axis=(0, 1))
    x2 = xt.reshape(-1, xt.shape[-1])
    gx += gB @ W_B.T + gC @ W_C.T + gz.sum(axis=-1, keepdims=True) * W_dt[:, 0]
    gWB = x2.T @ gB.reshape(-1, gB.shape[-1])
    gWC = x2.T @ gC.reshape(-1, gC.shape[-1])
    gWdt = x2.T @ gz.reshape(-1, gz.shape[-1]).sum(axis=1, keepdims=True)
    gA_log = gA * A
    return gx.transpose(1, 0, 2), gA_log, gWB, gWC, gWdt, gb, gD


def selective_scan(x: Tensor, p: SsmParams, reverse: bool = False) -> Tensor:
    """Run the selective scan over x (B x L x D); ``reverse`` scans from the end."""
    if x.ndim != 3:
        raise ShapeError(f"selective_scan expects B x L x D, got {x.shape}")
    if x.shape[1] < 1:
        raise ContractViolation("selective_scan needs a sequence of length >= 1")
    if x.shape[2] != p.d_model:
        raise ShapeError(f"sequence width {x.shape[2]} != scan width {p.d_model}")
    if reverse:
        return flip(selective_scan(flip(x, 1), p), 1)
    fields = p.fields()
    arrs = [f.data for f in fields]
    y, cache = _scan_core(x.data, *arrs)
    A_log, W_B, W_C, W_dt, _, D_skip = arrs

    def bw(g):
        gx, *gp = _scan_backward(g, cache, A_log, W_B, W_C, W_dt, D_skip)
        return (gx, *gp)

    return _make(np.ascontiguousarray(y), (x, *fields), bw, "selective_scan")


def selective_scan_reference(x: np.ndarray, A_log, W_B, W_C, W_dt, b_dt, D_skip) -> np.ndarray:
    """Plain per-step loop in float64; the oracle for :func:`selective_scan`."""
    x = np.asarray(x, dtype=np.float64)
    A = -np.exp(np.asarray(A_log, dtype=np.float64))
    W_B, W_C, W_dt = (np.asarray(w, dtype=np.float64) for w in (W_B, W_C, W_dt))
    b_dt, D_skip = np.asarray(b_dt, np.float64), np.asarray(D_skip, np.float64)
    B, L, D = x.shape
    N = A.shape[1]
    y = np.zeros_like(x)
    for b in range(B):
        h = np.zeros((D, N))
        for t in range(L):
            xv = x[b, t]
            bvec = xv @ W_B
            cvec = xv @ W_C
            pre = float(xv @ W_dt[:, 0])
            for d in range(D):
                dt = np.log1p(np.exp(pre + b_dt[d]))
                for s in range(N):
                    h[d, s] = np.exp(dt * A[d, s]) * h[d, s] + dt * bvec[s] * xv[d]
                y[b, t, d] = float(np.dot(cvec, h[d])) + D_skip[d] * xv[d]
    return y


def bimamba(seq: Tensor, p_fwd: SsmParams, p_rev: SsmParams) -> Tensor:
    """Forward scan plus reverse scan, summed."""
    if (p_fwd.d_model, p_fwd.d_state) != (p_rev.d_model, p_rev.d_state):
        raise ShapeError("forward and reverse scan parameters differ in shape: "
                         f"{(p_fwd.d_model, p_fwd.d_state)} vs {(p_rev.d_model, p_rev.d_state)}")
    return add(selective_scan(seq, p_fwd), selective_scan(seq, p_rev, reverse=True))


class BiMamba(Module):
    """Mamba block around a bidirectional scan.

    in_proj -> (u, gate); u -> causal depthwise conv -> SiLU -> fwd+rev scan;
    result * SiLU(gate) -> out_proj.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 8,
                 expand: int = 2, conv_width: int = 4, tied: bool = False):
        d_inner = expand * d_model
        self.d_model, self.d_inner, self.tied = d_model, d_inner, tied
        self.in_proj = Linear(d_model, 2 * d_inner, rng, bias=False)
        dt = get_dtype()
        self.conv_weight = parameter((rng.uniform(-1, 1, (d_inner, conv_width))
                                      / np.sqrt(conv_width)).astype(dt))
        self.conv_bias = parameter(np.zeros(d_inner, dtype=dt))
        self.scan_fwd = SsmParams(d_inner, d_state, rng)
        self.scan_rev = None if tied else SsmParams(d_inner, d_state, rng)
        self.out_proj = Linear(d_inner, d_model, rng, bias=False)

    @property
    def reverse_params(self) -> SsmParams:
        return self.scan_fwd if self.tied else self.scan_rev

    def scan_parameter_count(self) -> int:
        n = self.scan_fwd.num_parameters()
        return n if self.tied else n + self.scan_rev.num_parameters()

    def forward(self, seq: Tensor, bypass_wrapper: bool = False) -> Tensor:
        if bypass_wrapper:
            return bimamba(seq, self.scan_fwd, self.reverse_params)
        u, gate = split(self.in_proj(seq), [self.d_inner, self.d_inner], axis=2)
        u = silu(nn_ops.causal_depthwise_conv1d(u, self.conv_weight, self.conv_bias))
        y = bimamba(u, self.scan_fwd, self.reverse_params)
        return self.out_proj(y * silu(gate))
