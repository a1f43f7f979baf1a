"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, mul, no_grad, precision, tsum

DEFAULT_STEP = 1e-3


def _probe_indices(size: int, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def check_gradients(fn: Callable[[], Tensor], inputs: Mapping[str, Tensor], seed: int = 0,
                    h: float = DEFAULT_STEP, max_probes: int | None = 24,
                    wide_reference: bool = True, stencil: int = 4) -> dict[str, float]:
    """Compare analytic and numeric gradients of ``sum(fn() * R)`` for random R.

    Returns, per input, ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    over the probed elements, i.e. the worst error relative to the scale of
    that gradient. ``fn`` must be deterministic.

    With ``wide_reference`` the finite differences of float32 inputs are
    taken in float64 at the same (float32) point, so the reference is not
    limited by float32 cancellation in ``f(x+h) - f(x-h)``.

    ``stencil`` 2 is the plain central difference; 4 adds the +-2h points
    (fourth-order accurate), which matters for small gradients riding on a
    large objective.
    """
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    rng = np.random.default_rng(seed)
    out = fn()
    weights = rng.standard_normal(out.shape)
    w_t = Tensor(weights, dtype=out.dtype)
    for t in inputs.values():
        t.grad = None
    backward(tsum(mul(out, w_t)))

    def objective() -> float:
        with no_grad():
            return float(np.sum(fn().data.astype(np.float64) * weights))

    analytic = {name: (np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64))
                for name, t in inputs.items()}
    widen = wide_reference and any(t.dtype == np.float32 for t in inputs.values())
    saved = {name: t.data for name, t in inputs.items()}
    if widen:
        for t in inputs.values():
            t.data = t.data.astype(np.float64)
    try:
        with precision(np.float64 if widen else out.dtype):
            return _numeric_report(inputs, analytic, objective, h, max_probes, rng, stencil)
    finally:
        for name, t in inputs.items():
            t.data = saved[name]


def _central(flat: np.ndarray, i: int, objective, h: float) -> float:
    orig = flat[i]
    up = flat.dtype.type(orig + h)
    down = flat.dtype.type(orig - h)
    flat[i] = up
    f_up = objective()
    flat[i] = down
    f_down = objective()
    flat[i] = orig
    return (f_up - f_down) / (float(up) - float(down))


def _numeric_report(inputs, analytic, objective, h, max_probes, rng, stencil) -> dict[str, float]:
    report = {}
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        idx = _probe_indices(flat.size, max_probes, rng)
        a_vals, n_vals = [], []
        for i in idx:
            d1 = _central(flat, i, objective, h)
            if stencil == 4:
                d1 = (4 * d1 - _central(flat, i, objective, 2 * h)) / 3
            n_vals.append(d1)
            a_vals.append(analytic[name].reshape(-1)[i])
        a_vals, n_vals = np.array(a_vals), np.array(n_vals)
        scale = max(np.abs(a_vals).max(initial=0.0), np.abs(n_vals).max(initial=0.0))
        report[name] = 0.0 if scale < 1e-12 else float(np.abs(a_vals - n_vals).max() / scale)
    return report
