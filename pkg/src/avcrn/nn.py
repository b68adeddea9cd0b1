"""Parameter containers on top of :mod:`avcrn.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_param(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = uniform_param(rng, (n_out, n_in), n_in)
        self.bias = zeros_param((n_out,))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: tuple[int, int], rng: np.random.Generator,
                 stride=(1, 1), pad=(0, 0)):
        self.weight = uniform_param(rng, (c_out, c_in, *kernel), c_in * kernel[0] * kernel[1])
        self.bias = zeros_param((c_out,))
        self.stride, self.pad = tuple(stride), tuple(pad)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: tuple[int, int], rng: np.random.Generator,
                 stride=(1, 1), pad=(0, 0)):
        self.weight = uniform_param(rng, (c_in, c_out, *kernel), c_in * kernel[0] * kernel[1])
        self.bias = zeros_param((c_out,))
        self.stride, self.pad = tuple(stride), tuple(pad)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.weight, self.bias, self.stride, self.pad)


class LSTM(Module):
    """One LSTM layer; forget-gate bias starts at 1."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.w = uniform_param(rng, (4 * hidden, n_in), hidden)
        self.u = uniform_param(rng, (4 * hidden, hidden), hidden)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.b = Tensor(bias, requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.lstm_layer(x, self.w, self.u, self.b)
