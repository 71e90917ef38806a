"""Parameters, the module base class, and the two parametrised primitives."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .ops import RunningStats
from .tensor import DTYPE, Tensor


class Parameter(Tensor):
    """A trainable tensor. Its name is assigned by the owning module tree."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    """Minimal container: parameters, BN buffers and child modules are found
    by walking instance attributes in definition order."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module, RunningStats)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, RunningStats):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        bias: bool = True,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.weight = Parameter(he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels, dtype=DTYPE)) if bias else None

    def forward(self, x: Tensor, stride: Optional[int] = None) -> Tensor:
        return ops.conv2d(
            x, self.weight, self.bias,
            stride=self.stride if stride is None else stride,
            padding=self.padding,
            dilation=self.dilation,
        )

    def output_extent(self, h: int, w: int, stride: Optional[int] = None) -> tuple[int, int]:
        s = self.stride if stride is None else stride
        k, p, d = self.kernel_size, self.padding, self.dilation
        return (h + 2 * p - d * (k - 1) - 1) // s + 1, (w + 2 * p - d * (k - 1) - 1) // s + 1

    def flops(self, h: int, w: int, stride: Optional[int] = None) -> int:
        ho, wo = self.output_extent(h, w, stride)
        macs = self.out_channels * self.in_channels * self.kernel_size**2 * ho * wo
        return 2 * macs


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=DTYPE))
        self.running = RunningStats.initial(channels)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running,
            training=self.training, eps=self.eps, momentum=self.momentum,
        )
