"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data), requires_grad=True, dtype=get_default_dtype(), name=name)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated at two standard deviations (out-of-range draws are redrawn)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class; parameters and submodules are discovered from attributes."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_out, d_in)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True,
                 pad_mode: str = "zeros"):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = Parameter(kaiming_uniform(rng, (c_out,), fan_in)) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.pad_mode = pad_mode

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


def activation(name: str):
    try:
        return {"elu": ops.elu, "relu": ops.relu, "gelu": ops.gelu}[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None
