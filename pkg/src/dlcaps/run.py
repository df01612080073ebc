"""Run configuration and the reproducible training run behind ``dlcaps train``."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as C
from .checkpoint import save_checkpoint
from .data_io import Dataset, batches, load_dataset
from .errors import ConfigurationError
from .model import DLCapsNet, ModelConfig, build_model, predict
from .training import EpochMetrics, TrainConfig, accuracy, fit, output_lengths

METRICS_HEADER = "epoch,phase,lr,train_loss,train_acc,val_acc,seconds"
ALIASES = {"lr": "train.base_lr", "config_seed": "seed"}
# symbol-style leaf names accepted in config files
LEAF_ALIASES = {"d_out": "out_dim", "n_v": "num_vectors"}
TOP_LEVEL = ("seed", "run_dir", "record_time", "data", "train", "model")


@dataclass
class DataConfig:
    dataset: str = "fmnist"
    # empty: $DLCAPS_DATA_DIR, falling back to ./data
    root: str = ""
    train_subset: int = 0
    val_subset: int = 0
    val_split: str = "test"
    resize: str = "bilinear"

    def __post_init__(self):
        if self.dataset not in ("fmnist", "cifar10", "cifar100", "svhn"):
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        if self.val_split not in ("train", "test"):
            raise ConfigurationError(f"val_split must be train or test, got {self.val_split!r}")
        if self.resize not in ("bilinear", "nearest", "none"):
            raise ConfigurationError(f"unknown resize {self.resize!r}")

    def resolved_root(self) -> Path:
        return Path(self.root or os.environ.get("DLCAPS_DATA_DIR", "data"))


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    # wall time breaks byte-identical reruns, so metrics.csv leaves it out by default
    record_time: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def resolved(self) -> "RunConfig":
        """Copy with the single run seed pushed into model and training."""
        out = C.apply(self, {})
        out.model.seed = self.seed
        out.train.seed = self.seed
        return out


def _qualify(key: str, known: list[str]) -> str:
    key = key.strip().lstrip("-").replace("-", "_")
    key = ALIASES.get(key, key)
    *head, leaf = key.split(".")
    key = ".".join(head + [LEAF_ALIASES.get(leaf, leaf)])
    if key in known:
        return key
    if key.split(".")[0] not in TOP_LEVEL and f"model.{key}" in known:
        return f"model.{key}"
    matches = [k for k in known if k.endswith("." + key)]
    if len(matches) == 1:
        return matches[0]
    if len(matches) > 1:
        raise ConfigurationError(f"ambiguous key {key!r}: {', '.join(matches)}")
    raise ConfigurationError(f"unknown config key {key!r}")


def preset_path(name: str) -> Path | None:
    candidate = resources.files("dlcaps").joinpath("configs").joinpath(f"{name}.cfg")
    return Path(str(candidate)) if candidate.is_file() else None


def load_run_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (path or packaged preset name) and apply overrides."""
    base = RunConfig()
    known = C.keys(base)
    entries: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            preset = preset_path(str(path))
            if preset is None:
                raise ConfigurationError(f"config {path} not found")
            p = preset
        for key, value in C.read_file(p).items():
            entries[_qualify(key, known)] = value
    for key, value in (overrides or {}).items():
        entries[_qualify(key, known)] = value
    return C.apply(base, entries).resolved()


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training set and a disjoint validation set per the data section."""
    d = cfg.data
    root = d.resolved_root()
    train = load_dataset(d.dataset, root, "train", d.resize)
    n_train = d.train_subset or len(train)
    if d.val_split == "train":
        val = train.subset(n_train, n_train + (d.val_subset or len(train) - n_train))
    else:
        val = load_dataset(d.dataset, root, "test", d.resize)
        val = val.subset(0, d.val_subset or len(val))
    return train.subset(0, n_train), val


def evaluate(model: DLCapsNet, ds: Dataset, batch_size: int = 256) -> float:
    return accuracy(predict(output_lengths(model, ds.images, batch_size)), ds.labels)


def format_metrics(m: EpochMetrics, with_time: bool = True) -> str:
    seconds = f"{m.seconds:.3f}" if with_time else "-"
    return f"{m.epoch},{m.phase},{m.lr:.8g},{m.loss:.8f},{m.accuracy:.6f},{m.val_accuracy:.6f},{seconds}"


def run_training(cfg: RunConfig, emit: Callable[[str], None] = print, data=None) -> list[EpochMetrics]:
    """Run both phases, writing run_config.txt, metrics.csv and checkpoints to ``run_dir``."""
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run_config.txt").write_text(C.dumps(cfg), encoding="utf-8")
    train, val = data if data is not None else load_data(cfg)
    if train.num_classes != cfg.model.num_classes:
        raise ConfigurationError(
            f"dataset has {train.num_classes} classes, model.num_classes = {cfg.model.num_classes}"
        )
    if train.images.shape[1:] != tuple(cfg.model.input_shape):
        raise ConfigurationError(
            f"dataset images are {train.images.shape[1:]}, model.input_shape = {cfg.model.input_shape}"
        )
    model = build_model(cfg.model)
    tc = cfg.train
    metrics_path = run_dir / "metrics.csv"
    metrics_path.write_text(METRICS_HEADER + "\n", encoding="utf-8")
    best = [-1.0]

    def on_epoch(m: EpochMetrics):
        emit(format_metrics(m))
        with metrics_path.open("a", encoding="utf-8") as fh:
            fh.write(format_metrics(m, cfg.record_time) + "\n")
        if len(val) and m.val_accuracy > best[0]:
            best[0] = m.val_accuracy
            save_checkpoint(run_dir / "checkpoint_best.dlcp", model)

    def on_phase_end(phase: int):
        save_checkpoint(run_dir / f"checkpoint_phase{phase}.dlcp", model)

    def make_batches(epoch: int):
        seed = int(np.random.SeedSequence([tc.seed, epoch]).generate_state(1)[0])
        return batches(train, tc.batch_size, seed=seed, shuffle=True)

    history = fit(
        model,
        make_batches,
        tc,
        validate=(lambda mdl: evaluate(mdl, val)) if len(val) else None,
        on_epoch=on_epoch,
        on_phase_end=on_phase_end,
    )
    save_checkpoint(run_dir / "checkpoint_final.dlcp", model)
    return history

