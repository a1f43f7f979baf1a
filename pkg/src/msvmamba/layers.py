"""Parameter containers wrapping the kernels in :mod:`nn_ops`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import nn_ops
from .errors import ShapeError
from .tensor import Tensor, get_dtype, parameter


class Module:
    """Minimal parameter tree.

    Attributes holding a grad-requiring :class:`Tensor` are parameters,
    attributes holding other tensors are buffers, and sub-modules (alone or
    in lists) are traversed in attribute-definition order.
    """

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Tensor, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif val.requires_grad:
                yield name, val

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif not val.requires_grad:
                yield name, val

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.named_parameters()}
        out.update({name: t.data for name, t in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(get_dtype())


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        if k not in (1, 3, 5, 7):
            raise ValueError(f"kernel size must be one of 1, 3, 5, 7, got {k}")
        self.weight = parameter(_normal(rng, (c_out, c_in, k, k), np.sqrt(2.0 / (c_in * k * k))))
        self.bias = parameter(np.zeros(c_out, dtype=get_dtype())) if bias else None
        self.stride = stride
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        return nn_ops.conv2d(x, self.weight, self.bias, self.stride, self.k // 2)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = nn_ops.BN_MOMENTUM, eps: float = nn_ops.BN_EPS):
        dt = get_dtype()
        self.gamma = parameter(np.ones(c, dtype=dt))
        self.beta = parameter(np.zeros(c, dtype=dt))
        self.running_mean = Tensor(np.zeros(c, dtype=dt))
        self.running_var = Tensor(np.ones(c, dtype=dt))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nn_ops.batchnorm(x, self.gamma, self.beta, self.running_mean.data,
                                self.running_var.data, self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = parameter(np.ones(d, dtype=get_dtype()))
        self.beta = parameter(np.zeros(d, dtype=get_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return nn_ops.layer_norm(x, self.gamma, self.beta)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        self.weight = parameter(_normal(rng, (d_in, d_out), std))
        self.bias = parameter(np.zeros(d_out, dtype=get_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return nn_ops.linear(x, self.weight, self.bias)
