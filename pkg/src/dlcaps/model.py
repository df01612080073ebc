"""DL-CapsNet assembly: stem, two CapsCells, MLCE, class routing and decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .blocks import MLCE, CapsCell, CapsCellConfig, MLCEConfig
from .capsule_ops import CapsSumConfig, ConvCapsConfig, squash
from .errors import ConfigurationError, UsageError
from .nn import Conv2D, Conv2DTranspose, Dense, Module
from .routing import DEFAULT_ITERATIONS, DynamicRouting
from .tensor import Tensor


@dataclass
class StemConfig:
    filters: int = 128
    kernel_size: int = 3
    stride: int = 1
    capsule_dim: int = 4

    def __post_init__(self):
        if self.filters % self.capsule_dim:
            raise ConfigurationError(
                f"stem filters {self.filters} not divisible by capsule_dim {self.capsule_dim}"
            )


@dataclass
class DecoderConfig:
    """Dense seed followed by transposed-conv stages.

    ``filters`` lists the channel width after every stage but the last, whose
    width is the image channel count.
    """

    seed_size: int = 8
    seed_channels: int = 64
    kernel_size: int = 3
    strides: tuple[int, ...] = (2, 2, 2)
    filters: tuple[int, ...] = (32, 16)
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if len(self.filters) != len(self.strides) - 1:
            raise ConfigurationError(
                f"decoder needs {len(self.strides) - 1} filter widths for {len(self.strides)} stages"
            )
        if self.output_activation not in ("sigmoid", "linear"):
            raise ConfigurationError(f"unknown decoder activation {self.output_activation!r}")


def _cell(dim, types, skip_kind="convcaps", skip_kernel=1):
    return CapsCellConfig(
        conv1=ConvCapsConfig(3, dim, types, 2),
        conv2=ConvCapsConfig(3, dim, types, 1),
        conv3=ConvCapsConfig(3, dim, types, 1),
        skip_kind=skip_kind,
        skip_kernel=skip_kernel,
    )


@dataclass
class ModelConfig:
    input_shape: tuple[int, ...] = (64, 64, 3)
    stem: StemConfig = field(default_factory=StemConfig)
    cell1: CapsCellConfig = field(default_factory=lambda: _cell(4, 32))
    cell2: CapsCellConfig = field(default_factory=lambda: _cell(8, 32))
    mlce: MLCEConfig = field(
        default_factory=lambda: MLCEConfig(
            cell1=_cell(8, 32, "routing3d", 3),
            cell2=_cell(8, 32, "routing3d", 3),
            capssum1=CapsSumConfig(32),
            capssum2=CapsSumConfig(32),
        )
    )
    num_classes: int = 10
    final_dim: int = 16
    routing_iterations: int = DEFAULT_ITERATIONS
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"input_shape must be (H, W, C), got {self.input_shape}")


@dataclass
class OutputCapsules:
    V: Tensor
    lengths: Tensor

    @property
    def num_classes(self) -> int:
        return self.V.shape[1]


class Decoder(Module):
    def __init__(self, capsule_dim: int, out_shape: tuple, cfg: DecoderConfig, rng):
        super().__init__()
        self.cfg = cfg
        h, w, c = out_shape
        size = cfg.seed_size
        for s in cfg.strides:
            size *= s
        if size != h or size != w:
            raise ConfigurationError(
                f"decoder seed {cfg.seed_size} with strides {cfg.strides} yields {size}x{size}, "
                f"input is {h}x{w}"
            )
        self.seed = Dense(capsule_dim, cfg.seed_size * cfg.seed_size * cfg.seed_channels, rng)
        widths = (cfg.seed_channels,) + tuple(cfg.filters) + (c,)
        self.stages = []
        for i, stride in enumerate(cfg.strides):
            layer = Conv2DTranspose(widths[i], widths[i + 1], cfg.kernel_size, rng, stride, "same")
            setattr(self, f"deconv{i + 1}", layer)
            self.stages.append(layer)

    def forward(self, capsule: Tensor) -> Tensor:
        cfg = self.cfg
        x = T.relu(self.seed(capsule))
        x = T.reshape(x, (capsule.shape[0], cfg.seed_size, cfg.seed_size, cfg.seed_channels))
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.stages) - 1:
                x = T.relu(x)
        return T.sigmoid(x) if cfg.output_activation == "sigmoid" else x


class DLCapsNet(Module):
    """The full network; parameters are created deterministically from ``cfg.seed``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h, w, c = cfg.input_shape
        st = cfg.stem
        self.stem = Conv2D(c, st.filters, st.kernel_size, rng, st.stride, "same")
        hs = T.conv_output_size(h, st.kernel_size, st.stride, "same")
        ws = T.conv_output_size(w, st.kernel_size, st.stride, "same")
        shape = (hs, ws, st.filters // st.capsule_dim, st.capsule_dim)

        with _stage("stem", "cell1"):
            self.cell1 = CapsCell(shape[2], shape[3], cfg.cell1, rng)
            shape = self.cell1.output_shape(*shape[:2])
        with _stage("cell1", "cell2"):
            self.cell2 = CapsCell(shape[2], shape[3], cfg.cell2, rng)
            shape = self.cell2.output_shape(*shape[:2])
        with _stage("cell2", "mlce"):
            self.mlce = MLCE(shape, cfg.mlce, rng)
        with _stage("mlce", "routing"):
            self.routing = DynamicRouting(
                self.mlce.out_caps, self.mlce.out_dim, cfg.num_classes, cfg.final_dim, rng,
                cfg.routing_iterations,
            )
        with _stage("routing", "decoder"):
            self.decoder = Decoder(cfg.final_dim, cfg.input_shape, cfg.decoder, rng)

    @property
    def dr_input_caps(self) -> int:
        return self.mlce.out_caps

    def forward(self, batch) -> OutputCapsules:
        x = T.as_tensor(batch)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.cfg.input_shape):
            raise UsageError(
                f"batch shape {x.shape} does not match model input (N, {', '.join(map(str, self.cfg.input_shape))})"
            )
        st = self.cfg.stem
        y = self.stem(x)
        n, h, w, _ = y.shape
        caps = squash(T.reshape(y, (n, h, w, st.filters // st.capsule_dim, st.capsule_dim)))
        caps = self.cell2(self.cell1(caps))
        primary = self.mlce(caps)
        V = self.routing(primary)
        return OutputCapsules(V, T.l2_norm(V, axis=-1))

    def decode(self, out: OutputCapsules, class_index) -> Tensor:
        """Reconstruct inputs from the chosen class capsule only; other capsules are dropped."""
        V = out.V
        n, k = V.shape[0], V.shape[1]
        idx = np.broadcast_to(np.asarray(class_index), (n,)).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= k):
            raise UsageError(f"class index out of range [0, {k}): {idx}")
        selected = T.slice_(V, (np.arange(n), idx))
        return self.decoder(selected)

    def param_table(self) -> list[tuple[str, int]]:
        """Per-layer parameter counts; MLCE is split into its four sub-layers."""
        rows = []
        for name, child in self.named_children():
            if isinstance(child, MLCE):
                rows.extend((f"mlce.{sub}", m.count_params()) for sub, m in child.named_children())
            else:
                rows.append((name, child.count_params()))
        return rows


class _stage:
    def __init__(self, before: str, after: str):
        self.before, self.after = before, after

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is ConfigurationError:
            raise ConfigurationError(f"{self.before} -> {self.after}: {exc}") from exc
        return False


def build_model(cfg: ModelConfig) -> DLCapsNet:
    return DLCapsNet(cfg)


def count_params(model: Module) -> int:
    return model.count_params()


def predict(out) -> np.ndarray:
    """Index of the longest capsule per row; ties go to the lowest index."""
    lengths = out.lengths.data if isinstance(out, OutputCapsules) else np.asarray(
        out.data if isinstance(out, Tensor) else out
    )
    return np.argmax(lengths, axis=-1)


def class_probabilities(out) -> np.ndarray:
    """Softmax over capsule lengths; the quantity averaged by ensembles."""
    lengths = out.lengths.data if isinstance(out, OutputCapsules) else np.asarray(out)
    with T.no_grad():
        return T.softmax(Tensor(lengths, dtype=lengths.dtype), axis=-1).data


def ensemble_predict(softmax_outputs: Sequence) -> np.ndarray:
    members = [np.asarray(m.data if isinstance(m, Tensor) else m) for m in softmax_outputs]
    if not members:
        raise UsageError("ensemble needs at least one member")
    shape = members[0].shape
    for m in members[1:]:
        if m.shape != shape:
            raise UsageError(f"ensemble member shapes differ: {shape} vs {m.shape}")
    return np.argmax(np.mean(np.stack(members), axis=0), axis=-1)
