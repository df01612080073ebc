"""CapsCells (normal and 3DR) and the multi-level capsule extractor."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .capsule_ops import CapsSum, CapsSumConfig, ConvCaps, ConvCapsConfig, squash
from .errors import ConfigurationError
from .nn import Module
from .routing import DEFAULT_ITERATIONS, Routing3D, Routing3DConfig
from .tensor import Tensor

SKIP_KINDS = ("convcaps", "routing3d")


@dataclass
class CapsCellConfig:
    conv1: ConvCapsConfig = field(default_factory=lambda: ConvCapsConfig(stride=2))
    conv2: ConvCapsConfig = field(default_factory=ConvCapsConfig)
    conv3: ConvCapsConfig = field(default_factory=ConvCapsConfig)
    skip_kind: str = "convcaps"
    skip_kernel: int = 1
    iterations: int = DEFAULT_ITERATIONS

    def __post_init__(self):
        if self.skip_kind not in SKIP_KINDS:
            raise ConfigurationError(f"skip_kind must be one of {SKIP_KINDS}, got {self.skip_kind!r}")


class CapsCell(Module):
    """Three stacked ConvCaps with a skip from the first to the last.

    The skip is a ConvCaps for normal cells and a 3D routing layer for 3DR
    cells; trunk and skip are summed and squashed.
    """

    def __init__(self, in_types: int, in_dim: int, cfg: CapsCellConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.conv1, cfg.conv2, cfg.conv3
        self.conv1 = ConvCaps(in_types, in_dim, c1, rng)
        self.conv2 = ConvCaps(c1.num_vectors, c1.capsule_dim, c2, rng)
        self.conv3 = ConvCaps(c2.num_vectors, c2.capsule_dim, c3, rng)
        if cfg.skip_kind == "convcaps":
            skip_cfg = ConvCapsConfig(cfg.skip_kernel, c3.capsule_dim, c3.num_vectors, 1, "same")
            self.skip = ConvCaps(c1.num_vectors, c1.capsule_dim, skip_cfg, rng)
        else:
            r_cfg = Routing3DConfig(c3.num_vectors, c3.capsule_dim, cfg.skip_kernel, 1, "same")
            self.skip = Routing3D(c1.capsule_dim, r_cfg, rng, cfg.iterations)

    @property
    def out_types(self) -> int:
        return self.cfg.conv3.num_vectors

    @property
    def out_dim(self) -> int:
        return self.cfg.conv3.capsule_dim

    def output_shape(self, h: int, w: int) -> tuple[int, int, int, int]:
        h1, w1, _, _ = self.conv1.output_shape(h, w)
        h2, w2, _, _ = self.conv2.output_shape(h1, w1)
        h3, w3, t, d = self.conv3.output_shape(h2, w2)
        if (h3, w3) != (h1, w1):
            raise ConfigurationError(
                f"CapsCell trunk output {(h3, w3, t, d)} does not match skip output {(h1, w1, t, d)}"
            )
        return h3, w3, t, d

    def forward(self, caps_in: Tensor) -> Tensor:
        l1 = self.conv1(caps_in)
        trunk = self.conv3(self.conv2(l1))
        skip = self.skip(l1)
        if trunk.shape != skip.shape:
            raise ConfigurationError(f"CapsCell trunk {trunk.shape} and skip {skip.shape} differ")
        return squash(trunk + skip)


@dataclass
class MLCEConfig:
    cell1: CapsCellConfig = field(default_factory=lambda: CapsCellConfig(skip_kind="routing3d", skip_kernel=3))
    cell2: CapsCellConfig = field(default_factory=lambda: CapsCellConfig(skip_kind="routing3d", skip_kernel=3))
    capssum1: CapsSumConfig = field(default_factory=CapsSumConfig)
    capssum2: CapsSumConfig = field(default_factory=CapsSumConfig)
    summarize: bool = True


class MLCE(Module):
    """Two 3DR cells, each summarized by a CapsSum, concatenated into one capsule set.

    Output is (N, w1*w1 + w2*w2, D_out).  With ``summarize`` off the cell
    outputs are flattened directly, which is how the capsule reduction is
    measured.
    """

    def __init__(self, in_shape: tuple, cfg: MLCEConfig, rng: np.random.Generator):
        super().__init__()
        h, w, t, d = in_shape
        for name in ("cell1", "cell2"):
            if getattr(cfg, name).skip_kind != "routing3d":
                raise ConfigurationError(f"MLCE {name} must use a routing3d skip")
        self.cfg = cfg = copy.deepcopy(cfg)
        self.cell1 = CapsCell(t, d, cfg.cell1, rng)
        s1 = self.cell1.output_shape(h, w)
        self.cell2 = CapsCell(s1[2], s1[3], cfg.cell2, rng)
        s2 = self.cell2.output_shape(s1[0], s1[1])
        self.cell_shapes = (s1, s2)
        if cfg.summarize:
            if cfg.capssum1.out_dim != cfg.capssum2.out_dim:
                raise ConfigurationError(
                    f"MLCE CapsSum output dims differ: {cfg.capssum1.out_dim} vs {cfg.capssum2.out_dim}"
                )
            for shape in (s1, s2):
                if shape[0] != shape[1]:
                    raise ConfigurationError(f"CapsSum needs a square grid, got {shape[:2]}")
            self.sum_cfgs = (
                _resolve_sum(cfg.capssum1, s1),
                _resolve_sum(cfg.capssum2, s2),
            )
            self.capssum1 = CapsSum(self.sum_cfgs[0], rng)
            self.capssum2 = CapsSum(self.sum_cfgs[1], rng)
        elif s1[3] != s2[3]:
            raise ConfigurationError(f"unsummarized MLCE needs equal capsule dims, got {s1} and {s2}")

    @property
    def out_dim(self) -> int:
        return self.cfg.capssum1.out_dim if self.cfg.summarize else self.cell_shapes[0][3]

    @property
    def out_caps(self) -> int:
        return sum(self.level_caps)

    @property
    def level_caps(self) -> tuple[int, int]:
        s1, s2 = self.cell_shapes
        if self.cfg.summarize:
            return s1[0] * s1[1], s2[0] * s2[1]
        return s1[0] * s1[1] * s1[2], s2[0] * s2[1] * s2[2]

    def forward(self, caps_in: Tensor) -> Tensor:
        c1 = self.cell1(caps_in)
        c2 = self.cell2(c1)
        if self.cfg.summarize:
            low, high = self.capssum1(c1), self.capssum2(c2)
        else:
            low, high = c1, c2
        n = caps_in.shape[0]
        low = T.reshape(low, (n, -1, low.shape[-1]))
        high = T.reshape(high, (n, -1, high.shape[-1]))
        return T.concat([low, high], axis=1)


def _resolve_sum(cfg: CapsSumConfig, shape) -> CapsSumConfig:
    h, _, t, d = shape
    for name, want in (("spatial_w", h), ("in_types", t), ("in_dim", d)):
        have = getattr(cfg, name)
        if have and have != want:
            raise ConfigurationError(f"CapsSum {name}={have} but the preceding cell emits {want}")
    return CapsSumConfig(cfg.out_dim, cfg.apply_squash, h, t, d)
