"""Capsule primitives: squash, ConvCaps and CapsSum.

Capsule tensors are NHWC with the channel axis split into
``(types, dim)``, i.e. shape ``(N, H, W, T, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .nn import CAPSULE_GAIN, Module, he_uniform, zeros_param
from .tensor import Function, Tensor

SQUASH_EPS = 1e-8


class Squash(Function):
    """v = |s|^2 / (1 + |s|^2) * s / (|s| + eps) along the last axis."""

    name = "squash"

    @staticmethod
    def forward(ctx, s, eps=SQUASH_EPS):
        n2 = np.sum(s * s, axis=-1, keepdims=True)
        n = np.sqrt(n2)
        scale = n2 / ((1.0 + n2) * (n + eps))
        ctx.s, ctx.n, ctx.n2, ctx.scale, ctx.eps = s, n, n2, scale, eps
        return scale * s

    @staticmethod
    def backward(ctx, grad):
        s, n, n2, scale, eps = ctx.s, ctx.n, ctx.n2, ctx.scale, ctx.eps
        # d(scale)/dn divided by n, finite at n = 0
        dscale_over_n = (2.0 / (n + eps) - 2.0 * n2 / ((1.0 + n2) * (n + eps)) - n / (n + eps) ** 2) / (
            1.0 + n2
        )
        sg = np.sum(s * grad, axis=-1, keepdims=True)
        return (scale * grad + dscale_over_n * sg * s,)


def squash(s, eps: float = SQUASH_EPS) -> Tensor:
    return Squash.apply(s, eps=eps)


@dataclass
class ConvCapsConfig:
    kernel_size: int = 3
    capsule_dim: int = 4
    num_vectors: int = 32
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel_size < 1 or self.capsule_dim < 1 or self.num_vectors < 1:
            raise ConfigurationError(f"ConvCaps sizes must be >= 1: {self}")
        if self.stride < 1:
            raise ConfigurationError(f"ConvCaps stride must be >= 1: {self}")


@dataclass
class CapsSumConfig:
    """``spatial_w``, ``in_types`` and ``in_dim`` may be left as 0 and filled in from shapes."""

    out_dim: int = 8
    apply_squash: bool = True
    spatial_w: int = 0
    in_types: int = 0
    in_dim: int = 0

    def param_count(self) -> int:
        w, s = self.spatial_w, self.in_types
        return w * w * (s * self.in_dim * self.out_dim + self.out_dim)


def _flatten_caps(x: Tensor) -> Tensor:
    if x.ndim == 5:
        n, h, w, t, d = x.shape
        return T.reshape(x, (n, h, w, t * d))
    if x.ndim == 4:
        return x
    raise ConfigurationError(f"expected capsule tensor (N,H,W,T,D) or (N,H,W,C), got {x.shape}")


def conv_caps(caps_in, kernel, bias, cfg: ConvCapsConfig) -> Tensor:
    """Conv over flattened capsule channels, regroup as (N_v, D), squash."""
    x = _flatten_caps(T.as_tensor(caps_in))
    expected = cfg.num_vectors * cfg.capsule_dim
    if kernel.shape[3] != expected:
        raise ConfigurationError(
            f"ConvCaps kernel {kernel.shape} does not emit {cfg.num_vectors}x{cfg.capsule_dim} channels"
        )
    y = T.conv2d(x, kernel, bias, cfg.stride, cfg.padding)
    n, h, w, _ = y.shape
    return squash(T.reshape(y, (n, h, w, cfg.num_vectors, cfg.capsule_dim)))


class ConvCaps(Module):
    def __init__(self, in_types: int, in_dim: int, cfg: ConvCapsConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.in_types, self.in_dim = in_types, in_dim
        cin = in_types * in_dim
        k = cfg.kernel_size
        self.kernel = he_uniform(rng, (k, k, cin, cfg.num_vectors * cfg.capsule_dim), k * k * cin, CAPSULE_GAIN)
        self.bias = zeros_param((cfg.num_vectors * cfg.capsule_dim,))

    def forward(self, caps_in: Tensor) -> Tensor:
        channels = caps_in.shape[3] * caps_in.shape[4] if caps_in.ndim == 5 else caps_in.shape[-1]
        if channels != self.in_types * self.in_dim:
            raise ConfigurationError(
                f"ConvCaps expects {self.in_types}x{self.in_dim} input capsules, got shape {caps_in.shape}"
            )
        return conv_caps(caps_in, self.kernel, self.bias, self.cfg)

    def output_shape(self, h: int, w: int) -> tuple[int, int, int, int]:
        c = self.cfg
        return (
            T.conv_output_size(h, c.kernel_size, c.stride, c.padding),
            T.conv_output_size(w, c.kernel_size, c.stride, c.padding),
            c.num_vectors,
            c.capsule_dim,
        )


def caps_sum(caps_in, weight, bias, apply_squash: bool = True) -> Tensor:
    """Summarize the S capsules at each location with that location's own dense map.

    ``caps_in`` is (N, w, w, S, D_in), ``weight`` is (w, w, S*D_in, D_out) and
    ``bias`` is (w, w, D_out).  Returns (N, w, w, 1, D_out).
    """
    caps_in = T.as_tensor(caps_in)
    if caps_in.ndim != 5:
        raise ConfigurationError(f"CapsSum expects (N,w,w,S,D_in), got {caps_in.shape}")
    n, h, w, s, d = caps_in.shape
    if weight.shape[:3] != (h, w, s * d):
        raise ConfigurationError(
            f"CapsSum input {caps_in.shape} does not match weights {weight.shape}"
        )
    flat = T.reshape(caps_in, (n, h, w, 1, s * d))
    out = T.batched_matmul(flat, weight) + T.reshape(bias, (h, w, 1, -1))
    return squash(out) if apply_squash else out


class CapsSum(Module):
    def __init__(self, cfg: CapsSumConfig, rng: np.random.Generator):
        super().__init__()
        if min(cfg.spatial_w, cfg.in_types, cfg.in_dim, cfg.out_dim) < 1:
            raise ConfigurationError(f"CapsSum config has unresolved sizes: {cfg}")
        self.cfg = cfg
        w, fan_in = cfg.spatial_w, cfg.in_types * cfg.in_dim
        self.weight = he_uniform(rng, (w, w, fan_in, cfg.out_dim), fan_in, CAPSULE_GAIN)
        self.bias = zeros_param((w, w, cfg.out_dim))

    def forward(self, caps_in: Tensor) -> Tensor:
        c = self.cfg
        if caps_in.ndim != 5 or caps_in.shape[1:] != (c.spatial_w, c.spatial_w, c.in_types, c.in_dim):
            raise ConfigurationError(
                f"CapsSum expects (N,{c.spatial_w},{c.spatial_w},{c.in_types},{c.in_dim}), got {caps_in.shape}"
            )
        return caps_sum(caps_in, self.weight, self.bias, c.apply_squash)
