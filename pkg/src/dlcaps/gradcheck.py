"""Central finite-difference gradient checks and the built-in check suites."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

OPS_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(f: Callable, x, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps one tensor (or, when ``x`` is a list, several tensors) to a
    scalar tensor.  Evaluation happens in float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in (x if isinstance(x, (list, tuple)) else [x])]
    with T.precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        T.backward(f(*leaves))
        worst = 0.0
        with T.no_grad():
            for leaf in leaves:
                numeric = np.zeros_like(leaf.data)
                flat, nflat = leaf.data.reshape(-1), numeric.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = f(*leaves).item()
                    flat[i] = orig - eps
                    down = f(*leaves).item()
                    flat[i] = orig
                    nflat[i] = (up - down) / (2 * eps)
                worst = max(worst, _relative_error(leaf.grad, numeric))
    return worst


def parameter_gradient_check(
    loss_fn: Callable[[], Tensor],
    named_params: Sequence[tuple[str, Tensor]],
    eps: float = 1e-5,
    coords_per_param: int | None = None,
    seed: int = 0,
) -> tuple[float, str]:
    """Check d(loss)/d(param) for existing float64 parameter tensors.

    Returns the worst relative error and the parameter it occurred in.  With
    ``coords_per_param`` only that many randomly chosen coordinates of each
    parameter are perturbed.
    """
    rng = np.random.default_rng(seed)
    for _, p in named_params:
        p.zero_grad()
    T.backward(loss_fn())
    worst, worst_name = 0.0, ""
    with T.no_grad():
        for name, p in named_params:
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if coords_per_param is not None and flat.size > coords_per_param:
                coords = rng.choice(flat.size, coords_per_param, replace=False)
            analytic = p.grad.reshape(-1)[coords]
            numeric = np.empty(len(coords))
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
            err = _relative_error(analytic, numeric)
            if err >= worst:
                worst, worst_name = err, name
    return worst, worst_name


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _projected(fn, shape_out_seed=1234):
    """Turn a tensor-valued op into a scalar by a fixed random projection."""

    def scalar(*xs):
        y = fn(*xs)
        r = np.random.default_rng(shape_out_seed).standard_normal(y.shape)
        return T.reduce_sum(y * r)

    return scalar


def _ops_cases(rng):
    from . import capsule_ops as co
    from . import routing as ro
    from .capsule_ops import ConvCapsConfig
    from .training import MarginLossParams, margin_loss, reconstruction_loss

    def r(*shape):
        return rng.standard_normal(shape)

    def away_from_zero(*shape):
        x = rng.uniform(0.2, 1.0, shape)
        return x * rng.choice([-1.0, 1.0], shape)

    cases = [
        ("add", lambda a, b: a + b, [r(3, 4), r(4)]),
        ("sub", lambda a, b: a - b, [r(2, 3), r(2, 1)]),
        ("mul", lambda a, b: a * b, [r(3, 4), r(3, 1)]),
        ("div", lambda a, b: a / b, [r(3, 4), rng.uniform(0.5, 2.0, (4,))]),
        ("scalar_ops", lambda a: 2.5 * a - 1.0 + a / 3.0, [r(2, 5)]),
        ("neg", lambda a: -a, [r(4)]),
        ("power", lambda a: a**3, [r(3, 3)]),
        ("exp", T.exp, [r(2, 3)]),
        ("log", T.log, [rng.uniform(0.5, 2.0, (2, 3))]),
        ("sqrt", T.sqrt, [rng.uniform(0.5, 2.0, (2, 3))]),
        ("relu", T.relu, [away_from_zero(3, 4)]),
        ("sigmoid", T.sigmoid, [r(3, 4)]),
        ("reshape", lambda a: T.reshape(a, (6, 2)), [r(3, 4)]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        ("slice", lambda a: a[1:, ::2], [r(4, 5)]),
        ("reduce_sum", lambda a: T.reduce_sum(a, axis=1), [r(3, 4)]),
        ("reduce_mean", lambda a: T.reduce_mean(a, axis=0, keepdims=True), [r(3, 4)]),
        ("l2_norm", lambda a: T.l2_norm(a, axis=-1), [r(3, 4)]),
        ("batched_matmul", T.batched_matmul, [r(2, 3, 4), r(4, 5)]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [r(3, 4)]),
        ("conv2d", lambda x, k, b: T.conv2d(x, k, b, 1, "same"), [r(1, 5, 5, 2), r(3, 3, 2, 3), r(3)]),
        ("conv2d_strided", lambda x, k, b: T.conv2d(x, k, b, 2, "valid"), [r(2, 5, 6, 2), r(3, 3, 2, 2), r(2)]),
        (
            "conv2d_transpose",
            lambda x, k, b: T.conv2d_transpose(x, k, b, 2, "same"),
            [r(1, 3, 3, 2), r(3, 3, 2, 2), r(2)],
        ),
        ("squash", co.squash, [r(4, 6)]),
        (
            "conv_caps",
            lambda x, k, b: co.conv_caps(x, k, b, ConvCapsConfig(3, 3, 2, 2, "same")),
            [r(1, 5, 5, 2, 2), r(3, 3, 4, 6) * 0.5, r(6)],
        ),
        ("caps_sum", lambda x, w, b: co.caps_sum(x, w, b), [r(2, 3, 3, 4, 2), r(3, 3, 8, 3) * 0.5, r(3, 3, 3)]),
        ("compute_votes", ro.compute_votes, [r(2, 3, 4), r(3, 2, 5, 4)]),
        ("dynamic_routing", lambda v: ro.dynamic_routing(v, 3), [r(2, 4, 3, 4) * 0.5]),
        ("dynamic_routing_1iter", lambda v: ro.dynamic_routing(v, 1), [r(4, 3, 4)]),
        (
            "routing_3d",
            lambda x, k, b: ro.routing_3d(x, k, b, ro.Routing3DConfig(3, 2, 3, 1, "same"), 3),
            [r(1, 4, 4, 2, 3) * 0.5, r(3, 3, 3, 6) * 0.5, r(6) * 0.1],
        ),
    ]

    lengths = rng.uniform(0.0, 1.0, (4, 5))
    targets = np.eye(5)[rng.integers(0, 5, 4)]
    cases.append(("margin_loss", lambda l: margin_loss(l, targets, MarginLossParams()), [lengths]))
    image = rng.uniform(0, 1, (2, 3, 3, 1))
    cases.append(("reconstruction_loss", lambda x: reconstruction_loss(x, image, 0.7), [r(2, 3, 3, 1)]))

    # margin loss of squashed 8-dim capsules produced by a matmul
    caps = rng.uniform(0.0, 1.0, (4, 1, 8))
    W = r(8, 3) * 0.5

    def margin_chain(u, w):
        v = co.squash(T.batched_matmul(u, w))
        return margin_loss(T.l2_norm(T.reshape(v, (4, 3)), axis=-1, keepdims=True), np.ones((4, 1)), MarginLossParams())

    cases.append(("margin_squash_matmul", margin_chain, [caps, W]))
    return cases


def _cell_cases(rng):
    from .blocks import CapsCell, CapsCellConfig
    from .capsule_ops import ConvCapsConfig

    out = []
    for kind, kernel in (("convcaps", 1), ("routing3d", 3)):
        cfg = CapsCellConfig(
            ConvCapsConfig(3, 2, 2, 2), ConvCapsConfig(3, 2, 2, 1), ConvCapsConfig(3, 2, 2, 1), kind, kernel
        )
        out.append((f"caps_cell_{kind}", CapsCell(2, 2, cfg, np.random.default_rng(1)), rng.standard_normal((1, 4, 4, 2, 2))))
    return out


def run_ops_suite(eps: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in _ops_cases(rng):
        f = fn if name in ("margin_loss", "reconstruction_loss", "margin_squash_matmul") else _projected(fn)
        results.append(CheckResult(name, gradient_check(f, inputs, eps), OPS_TOLERANCE))
    with T.precision(np.float64):
        for name, cell, x in _cell_cases(rng):
            proj = np.random.default_rng(7).standard_normal(cell(Tensor(x)).shape)
            err, _ = parameter_gradient_check(
                lambda: T.reduce_sum(cell(Tensor(x)) * proj), list(cell.named_parameters()), eps
            )
            results.append(CheckResult(name, err, OPS_TOLERANCE))
    return results


def tiny_model_config():
    """8x8x1 input, 2 classes, every width <= 4."""
    from .blocks import CapsCellConfig, MLCEConfig
    from .capsule_ops import CapsSumConfig, ConvCapsConfig
    from .model import DecoderConfig, ModelConfig, StemConfig

    def cell(stride, kind="convcaps", k=1):
        return CapsCellConfig(
            ConvCapsConfig(3, 2, 2, stride), ConvCapsConfig(3, 2, 2, 1), ConvCapsConfig(3, 2, 2, 1), kind, k
        )

    return ModelConfig(
        input_shape=(8, 8, 1),
        stem=StemConfig(4, 3, 1, 2),
        cell1=cell(2),
        cell2=cell(1),
        mlce=MLCEConfig(cell(2, "routing3d", 3), cell(2, "routing3d", 3), CapsSumConfig(3), CapsSumConfig(3)),
        num_classes=2,
        final_dim=4,
        decoder=DecoderConfig(seed_size=1, seed_channels=4, strides=(2, 2, 2), filters=(4, 2)),
        seed=3,
    )


def run_model_check(eps: float = 1e-5, seed: int = 0, coords_per_param: int | None = None) -> CheckResult:
    from .model import build_model
    from .training import margin_loss, MarginLossParams, reconstruction_loss

    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        model = build_model(tiny_model_config())
        # lift the biases off zero so every path carries signal
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.data[...] = rng.normal(0, 0.1, p.shape)
        x = rng.uniform(0, 1, (2, 8, 8, 1))
        targets = np.eye(2)[[0, 1]]

        def loss():
            out = model(x)
            l = margin_loss(out.lengths, targets, MarginLossParams())
            return l + reconstruction_loss(model.decode(out, [0, 1]), x, 0.5)

        err, name = parameter_gradient_check(loss, list(model.named_parameters()), eps, coords_per_param, seed)
    return CheckResult(f"model ({name})", err, MODEL_TOLERANCE)
