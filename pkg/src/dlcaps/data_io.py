"""Dataset readers (IDX, CIFAR binary), 32->64 resizing and batch iteration.

All loaders return images as float arrays in [0, 1] with shape (N, H, W, C).
Byte layouts are described in docs/formats.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, UsageError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32

FMNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}
CIFAR100_FILES = {"train": ("train.bin",), "test": ("test.bin",)}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.images[start:stop], self.labels[start:stop], self.split, self.num_classes)


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror}") from None


def _idx_header(raw: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    size = 4 + 4 * ndim
    if len(raw) < size:
        raise FormatError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: IDX magic {raw[:4].hex(' ')} (expected {magic:08x})")
    return struct.unpack(f">{ndim}I", raw[4:size])


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image file (magic 0x803) and label file (magic 0x801)."""
    raw_x, raw_y = _read(images_path), _read(labels_path)
    count, rows, cols = _idx_header(raw_x, IDX_IMAGES_MAGIC, 3, images_path)
    (n_labels,) = _idx_header(raw_y, IDX_LABELS_MAGIC, 1, labels_path)
    if count != n_labels:
        raise FormatError(f"{count} images in {images_path} but {n_labels} labels in {labels_path}")
    pixels = np.frombuffer(raw_x, dtype=np.uint8, offset=16)
    labels = np.frombuffer(raw_y, dtype=np.uint8, offset=8)
    if pixels.size != count * rows * cols:
        raise FormatError(f"{images_path}: expected {count * rows * cols} pixel bytes, found {pixels.size}")
    if labels.size != count:
        raise FormatError(f"{labels_path}: expected {count} label bytes, found {labels.size}")
    images = pixels.reshape(count, rows, cols, 1).astype(np.float32) / 255.0
    return Dataset(images, labels.astype(np.int64), split, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, H, W) and labels (N,) in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">2I", IDX_LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    )


def load_cifar_binary(
    paths: Sequence, cifar100: bool = False, coarse: bool = False, split: str = "train"
) -> Dataset:
    """Read CIFAR-style binary batches (label byte(s) then channel-planar RGB).

    CIFAR-10 records are 1 + 3072 bytes; CIFAR-100 records are 2 + 3072 with
    the coarse label first and the fine label second.
    """
    label_bytes = 2 if cifar100 else 1
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for path in [paths] if isinstance(paths, (str, Path)) else paths:
        raw = _read(path)
        if len(raw) == 0 or len(raw) % record:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of the {record}-byte record")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(rec[:, 0 if (coarse or not cifar100) else 1])
        planar = rec[:, label_bytes:].reshape(-1, 3, 32, 32)
        images.append(planar.transpose(0, 2, 3, 1))
    num_classes = (20 if coarse else 100) if cifar100 else 10
    x = np.concatenate(images).astype(np.float32) / 255.0
    return Dataset(x, np.concatenate(labels).astype(np.int64), split, num_classes)


def write_cifar_binary(path, images: np.ndarray, labels: np.ndarray, fine_labels=None) -> None:
    """Write uint8 (N, 32, 32, 3) images in CIFAR record layout."""
    images = np.asarray(images, dtype=np.uint8)
    planar = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if fine_labels is not None:
        cols.append(np.asarray(fine_labels, dtype=np.uint8)[:, None])
    Path(path).write_bytes(np.concatenate(cols + [planar], axis=1).tobytes())


def resize_bilinear_2x(images: np.ndarray, method: str = "bilinear") -> np.ndarray:
    """Upsample (N, 32, 32, C) to (N, 64, 64, C).

    Pixel centres are aligned (half-pixel convention): output pixel ``o`` samples
    input coordinate ``(o + 0.5) / 2 - 0.5`` clamped to the border, so every
    output is a convex combination of at most four input pixels.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:3] != (32, 32):
        raise UsageError(f"resize_bilinear_2x expects (N, 32, 32, C), got {images.shape}")
    if method == "nearest":
        return images.repeat(2, axis=1).repeat(2, axis=2)
    if method != "bilinear":
        raise UsageError(f"unknown resize method {method!r}")
    coord = np.clip((np.arange(64) + 0.5) / 2 - 0.5, 0, 31)
    lo = np.floor(coord).astype(int)
    hi = np.minimum(lo + 1, 31)
    frac = (coord - lo).astype(images.dtype)
    rows = images[:, lo] * (1 - frac)[None, :, None, None] + images[:, hi] * frac[None, :, None, None]
    out = rows[:, :, lo] * (1 - frac)[None, None, :, None] + rows[:, :, hi] * frac[None, None, :, None]
    return out.astype(images.dtype, copy=False)


def batches(
    ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, one-hot labels); the final batch may be short."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    eye = np.eye(ds.num_classes)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], eye[ds.labels[idx]]


def load_dataset(kind: str, root, split: str, resize: str = "bilinear") -> Dataset:
    """Load a named dataset from its standard file names under ``root``.

    ``kind`` is one of fmnist, cifar10, cifar100, svhn (SVHN pre-converted to
    the CIFAR-10 layout as ``svhn_train.bin`` / ``svhn_test.bin``).  Colour
    datasets are resized to 64x64 unless ``resize`` is ``none``.
    """
    root = Path(root)
    if split not in ("train", "test"):
        raise UsageError(f"split must be train or test, got {split!r}")
    if kind == "fmnist":
        xf, yf = FMNIST_FILES[split]
        return load_idx(root / xf, root / yf, 10, split)
    if kind == "cifar10":
        ds = load_cifar_binary([root / f for f in CIFAR10_FILES[split]], split=split)
    elif kind == "cifar100":
        ds = load_cifar_binary([root / f for f in CIFAR100_FILES[split]], cifar100=True, split=split)
    elif kind == "svhn":
        ds = load_cifar_binary([root / f"svhn_{split}.bin"], split=split)
    else:
        raise UsageError(f"unknown dataset {kind!r}")
    if resize != "none":
        ds.images = resize_bilinear_2x(ds.images, resize)
    return ds
