"""Minimal layer containers: parameter registry, dense and conv layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


# Squash shrinks a norm-n capsule to about n**2 for small n; stacked capsule
# layers keep a nonzero norm only when the init gain exceeds 2.
CAPSULE_GAIN = 3.0


def he_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = np.sqrt(2.0)) -> Tensor:
    """Uniform init with standard deviation ``gain / sqrt(fan_in)``."""
    bound = gain * np.sqrt(3.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Base class tracking parameters and sub-modules by attribute name.

    Registration order follows attribute assignment, so parameter names and
    their order are stable for a given configuration.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._children.items())

    def count_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = he_uniform(rng, (in_features, out_features), in_features)
        self.bias = zeros_param((out_features,))

    def forward(self, x: Tensor) -> Tensor:
        return T.batched_matmul(x, self.weight) + self.bias


class Conv2D(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding="same"):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = kernel_size * kernel_size * in_channels
        self.kernel = he_uniform(rng, (kernel_size, kernel_size, in_channels, out_channels), fan_in)
        self.bias = zeros_param((out_channels,))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class Conv2DTranspose(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding="same"):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = kernel_size * kernel_size * in_channels
        self.kernel = he_uniform(rng, (kernel_size, kernel_size, out_channels, in_channels), fan_in)
        self.bias = zeros_param((out_channels,))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.kernel, self.bias, self.stride, self.padding)
