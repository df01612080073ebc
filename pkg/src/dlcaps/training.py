"""Losses, Adam, learning-rate schedule and the two-phase training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, UsageError
from .model import DLCapsNet, predict
from .tensor import Tensor


@dataclass
class MarginLossParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not (0 < self.m_minus < self.m_plus < 1):
            raise ConfigurationError(f"margins must satisfy 0 < m_minus < m_plus < 1: {self}")
        if self.lam <= 0:
            raise ConfigurationError(f"lambda must be positive: {self}")


PHASE_PARAMS = {
    1: MarginLossParams(0.9, 0.1, 0.5),
    2: MarginLossParams(0.95, 0.05, 0.5),
}


def hard_training_params(phase: int) -> MarginLossParams:
    """Margin bounds per training phase; phase 2 tightens both."""
    try:
        p = PHASE_PARAMS[phase]
    except KeyError:
        raise UsageError(f"phase must be 1 or 2, got {phase}") from None
    return MarginLossParams(p.m_plus, p.m_minus, p.lam)


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    gamma: float = 0.96
    batch_size: int = 128
    epochs_phase1: int = 100
    epochs_phase2: int = 100
    phase1: MarginLossParams = field(default_factory=lambda: hard_training_params(1))
    phase2: MarginLossParams = field(default_factory=lambda: hard_training_params(2))
    # None: 0.0005 * pixels per image, i.e. 0.0005 * sum of squared errors
    recon_weight: float | None = None
    reset_adam_between_phases: bool = False
    stop_routing_gradient: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigurationError(f"base_lr must be >= 0, got {self.base_lr}")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ConfigurationError("epoch counts must be >= 0")

    def margin_params(self, phase: int) -> MarginLossParams:
        if phase not in (1, 2):
            raise UsageError(f"phase must be 1 or 2, got {phase}")
        return self.phase1 if phase == 1 else self.phase2

    def reconstruction_weight(self, input_shape) -> float:
        if self.recon_weight is not None:
            return self.recon_weight
        return 0.0005 * float(np.prod(input_shape))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise UsageError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def margin_loss(lengths, targets, p: MarginLossParams) -> Tensor:
    """Sum over classes of the two squared hinges, averaged over the batch."""
    lengths = T.as_tensor(lengths)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=lengths.dtype)
    if t.shape != lengths.shape:
        raise UsageError(f"targets {t.shape} do not match lengths {lengths.shape}")
    present = T.relu(p.m_plus - lengths) ** 2
    absent = T.relu(lengths - p.m_minus) ** 2
    per_class = present * t + absent * (p.lam * (1.0 - t))
    return T.reduce_sum(per_class) * (1.0 / lengths.shape[0])


def reconstruction_loss(recon, target, weight: float) -> Tensor:
    recon = T.as_tensor(recon)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if recon.shape != target.shape:
        raise UsageError(f"reconstruction {recon.shape} does not match input {target.shape}")
    diff = recon - target.astype(recon.dtype)
    return T.reduce_mean(diff * diff) * weight


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.gamma**epoch


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """In-place bias-corrected Adam update of the ``params`` arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("params, grads and optimizer state differ in length")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise UsageError(f"shape mismatch in adam_step: param {p.shape}, grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params: list[Tensor]):
        self.params = params
        self.state = AdamState.zeros_like(params)

    def reset(self) -> None:
        self.state = AdamState.zeros_like(self.params)

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class EpochMetrics:
    epoch: int
    phase: int
    lr: float
    loss: float
    accuracy: float
    seconds: float
    val_accuracy: float = float("nan")


def train_step(model: DLCapsNet, images, targets, cfg: TrainConfig, phase: int):
    """Forward, margin + reconstruction loss, backward; returns (loss value, predictions)."""
    out = model(images)
    loss = margin_loss(out.lengths, targets, cfg.margin_params(phase))
    weight = cfg.reconstruction_weight(model.cfg.input_shape)
    if weight > 0:
        recon = model.decode(out, np.argmax(targets, axis=1))
        loss = loss + reconstruction_loss(recon, images, weight)
    T.backward(loss)
    return loss.item(), predict(out)


def train_epoch(
    model: DLCapsNet,
    batches: Iterable,
    cfg: TrainConfig,
    phase: int,
    optimizer: Adam,
    epoch: int,
) -> EpochMetrics:
    """One pass over ``batches`` of (images, one-hot targets); ``epoch`` sets the lr."""
    _set_routing_gradient(model, cfg.stop_routing_gradient)
    lr = lr_at_epoch(epoch, cfg)
    start = time.perf_counter()
    total_loss, correct, seen = 0.0, 0, 0
    for images, targets in batches:
        optimizer.zero_grad()
        loss, pred = train_step(model, images, targets, cfg, phase)
        optimizer.step(lr)
        n = len(images)
        total_loss += loss * n
        correct += int(np.sum(pred == np.argmax(targets, axis=1)))
        seen += n
    if seen == 0:
        raise UsageError("train_epoch received no batches")
    return EpochMetrics(epoch, phase, lr, total_loss / seen, correct / seen, time.perf_counter() - start)


def _set_routing_gradient(model, stop: bool) -> None:
    from .routing import DynamicRouting, Routing3D

    def visit(module):
        if isinstance(module, (DynamicRouting, Routing3D)):
            module.stop_gradient = stop
        for _, child in module.named_children():
            visit(child)

    visit(model)


def output_lengths(model: DLCapsNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Capsule lengths for every image, computed without recording a graph."""
    chunks = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            chunks.append(model(images[i : i + batch_size]).lengths.data)
    if not chunks:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(chunks)


def accuracy(pred, labels) -> float:
    labels = np.asarray(labels)
    return float(np.mean(np.asarray(pred) == labels)) if labels.size else float("nan")


def per_class_accuracy(pred, labels, num_classes: int) -> np.ndarray:
    pred, labels = np.asarray(pred), np.asarray(labels)
    out = np.full(num_classes, np.nan)
    for k in range(num_classes):
        mask = labels == k
        if mask.any():
            out[k] = float(np.mean(pred[mask] == k))
    return out


def fit(
    model: DLCapsNet,
    make_batches: Callable[[int], Iterable],
    cfg: TrainConfig,
    validate: Callable[[DLCapsNet], float] | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
    on_phase_end: Callable[[int], None] | None = None,
) -> list[EpochMetrics]:
    """Phase-1 then phase-2 epochs with a single continuing lr schedule.

    ``make_batches(epoch)`` must return a fresh iterator per epoch.
    """
    optimizer = Adam(model.parameters())
    history = []
    epoch = 0
    for phase, n_epochs in ((1, cfg.epochs_phase1), (2, cfg.epochs_phase2)):
        if phase == 2 and cfg.reset_adam_between_phases:
            optimizer.reset()
        for _ in range(n_epochs):
            metrics = train_epoch(model, make_batches(epoch), cfg, phase, optimizer, epoch)
            if validate is not None:
                metrics.val_accuracy = validate(model)
            history.append(metrics)
            if on_epoch is not None:
                on_epoch(metrics)
            epoch += 1
        if on_phase_end is not None and n_epochs:
            on_phase_end(phase)
    return history
