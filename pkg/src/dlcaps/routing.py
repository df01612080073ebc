"""Routing by agreement: global dynamic routing and its local 3D variant."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .capsule_ops import squash
from .errors import ConfigurationError, UsageError
from .nn import CAPSULE_GAIN, Module, he_uniform, zeros_param
from .tensor import Tensor

DEFAULT_ITERATIONS = 3


@dataclass
class RoutingState:
    """Per-iteration trace of one routing call (arrays, detached)."""

    votes: np.ndarray | None = None
    logits: list = field(default_factory=list)
    couplings: list = field(default_factory=list)
    preactivations: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def compute_votes(u, W) -> Tensor:
    """û[..., i, j] = W[i, j] @ u[..., i].

    ``u`` is (..., N_in, D_in) and ``W`` is (N_in, N_out, D_out, D_in).
    """
    u, W = T.as_tensor(u), T.as_tensor(W)
    if W.ndim != 4 or u.ndim < 2 or u.shape[-2:] != (W.shape[0], W.shape[3]):
        raise ConfigurationError(f"votes: capsules {u.shape} do not match weights {W.shape}")
    lead = u.shape[:-2]
    col = T.reshape(u, lead + (W.shape[0], 1, W.shape[3], 1))
    return T.reshape(T.batched_matmul(W, col), lead + W.shape[:3])


def dynamic_routing(
    votes,
    iterations: int = DEFAULT_ITERATIONS,
    stop_gradient: bool = False,
    state: RoutingState | None = None,
) -> Tensor:
    """Route votes (..., N_in, N_out, D) to output capsules (..., N_out, D).

    Logits start at zero; each iteration normalizes them over outputs,
    takes the coupled sum of votes, squashes it and adds the vote/output dot
    products to the logits.  With ``stop_gradient`` the logit updates are
    computed from detached values, so gradients only follow the final
    weighted sum.
    """
    if iterations < 1:
        raise UsageError(f"routing needs at least one iteration, got {iterations}")
    votes = T.as_tensor(votes)
    if votes.ndim < 3:
        raise ConfigurationError(f"votes must be (..., N_in, N_out, D), got {votes.shape}")
    logits = Tensor(np.zeros(votes.shape[:-1]), dtype=votes.dtype)
    if state is not None:
        state.votes = votes.data
    v = None
    for r in range(iterations):
        c = T.softmax(logits, axis=-1)
        s = T.reduce_sum(T.reshape(c, c.shape + (1,)) * votes, axis=-3)
        v = squash(s)
        if state is not None:
            state.logits.append(logits.data)
            state.couplings.append(c.data)
            state.preactivations.append(s.data)
            state.outputs.append(v.data)
        if r == iterations - 1:
            break
        vv, uu = (v.detach(), votes.detach()) if stop_gradient else (v, votes)
        vv = T.reshape(vv, vv.shape[:-2] + (1,) + vv.shape[-2:])
        logits = logits + T.reduce_sum(uu * vv, axis=-1)
    return v


class DynamicRouting(Module):
    """Fully-connected routing layer holding one transform per (input, output) pair."""

    def __init__(self, in_caps, in_dim, out_caps, out_dim, rng, iterations=DEFAULT_ITERATIONS):
        super().__init__()
        self.iterations = iterations
        self.stop_gradient = False
        self.weight = he_uniform(rng, (in_caps, out_caps, out_dim, in_dim), in_dim, CAPSULE_GAIN)

    def forward(self, u: Tensor) -> Tensor:
        votes = compute_votes(u, self.weight)
        return dynamic_routing(votes, self.iterations, self.stop_gradient)


@dataclass
class Routing3DConfig:
    out_types: int
    out_dim: int
    kernel_size: int = 3
    stride: int = 1
    padding: str = "same"


def routing_3d(
    caps_in,
    kernel,
    bias,
    cfg: Routing3DConfig,
    iterations: int = DEFAULT_ITERATIONS,
    stop_gradient: bool = False,
    state: RoutingState | None = None,
) -> Tensor:
    """Local routing over capsule tensors (N, H, W, c_l, n_l) -> (N, H', W', c_out, n_out).

    Each input type's (H, W, n_l) slice is convolved with the same kernel
    (K, K, n_l, c_out * n_out) to produce its votes.  At every output location
    the c_l votes for each output capsule are routed exactly as in
    :func:`dynamic_routing`.
    """
    caps_in = T.as_tensor(caps_in)
    if caps_in.ndim != 5:
        raise ConfigurationError(f"3D routing expects (N,H,W,c,n) capsules, got {caps_in.shape}")
    n, h, w, cl, nl = caps_in.shape
    if kernel.shape[2] != nl or kernel.shape[3] != cfg.out_types * cfg.out_dim:
        raise ConfigurationError(
            f"3D routing kernel {kernel.shape} does not map dim {nl} to "
            f"{cfg.out_types}x{cfg.out_dim}"
        )
    x = T.reshape(T.transpose(caps_in, (0, 3, 1, 2, 4)), (n * cl, h, w, nl))
    y = T.conv2d(x, kernel, bias, cfg.stride, cfg.padding)
    ho, wo = y.shape[1], y.shape[2]
    y = T.reshape(y, (n, cl, ho, wo, cfg.out_types, cfg.out_dim))
    votes = T.transpose(y, (0, 2, 3, 1, 4, 5))
    return dynamic_routing(votes, iterations, stop_gradient, state)


class Routing3D(Module):
    def __init__(self, in_dim: int, cfg: Routing3DConfig, rng, iterations=DEFAULT_ITERATIONS):
        super().__init__()
        self.cfg, self.iterations = cfg, iterations
        self.stop_gradient = False
        k = cfg.kernel_size
        self.kernel = he_uniform(rng, (k, k, in_dim, cfg.out_types * cfg.out_dim), k * k * in_dim, CAPSULE_GAIN)
        self.bias = zeros_param((cfg.out_types * cfg.out_dim,))

    def forward(self, caps_in: Tensor) -> Tensor:
        return routing_3d(caps_in, self.kernel, self.bias, self.cfg, self.iterations, self.stop_gradient)
