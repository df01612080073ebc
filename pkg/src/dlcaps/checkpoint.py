"""Binary checkpoint files (``.dlcp``).

Layout, all integers little-endian::

    b"DLCP"                      magic
    u32  format version (1)
    u32  config length, then that many bytes of UTF-8 ``key = value`` text
    u32  parameter count
    per parameter:
        u32  name length, then UTF-8 name
        u8   dtype tag (1 = float32, 2 = float64)
        u32  rank, then rank x u32 extents
        raw little-endian element data, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import config as C
from .errors import CheckpointError, FormatError
from .model import DLCapsNet, ModelConfig

MAGIC = b"DLCP"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def dumps(config_text: str, params: list[tuple[str, np.ndarray]]) -> bytes:
    text = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(params))]
    for name, arr in params:
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in DTYPE_TAGS:
            raise CheckpointError(f"parameter {name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack("<BI", DTYPE_TAGS[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, source):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(raw: bytes, source="<bytes>") -> tuple[str, list[tuple[str, np.ndarray]]]:
    r = _Reader(raw, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    version, text_len = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    text = r.take(text_len).decode("utf-8")
    (count,) = r.unpack("<I")
    params = []
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in TAG_DTYPES:
            raise FormatError(f"{source}: parameter {name} has unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        dtype = TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        params.append((name, arr))
    if r.pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - r.pos} trailing bytes")
    return text, params


def save_checkpoint(path, model: DLCapsNet) -> None:
    params = [(name, p.data) for name, p in model.named_parameters()]
    Path(path).write_bytes(dumps(C.dumps(model.cfg), params))


def load_checkpoint(path) -> DLCapsNet:
    """Rebuild the model from the stored config and copy the stored parameters in."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    text, params = loads(raw, path)
    model = DLCapsNet(C.loads(ModelConfig, text, f"{path}:config"))
    expected = dict(model.named_parameters())
    if [n for n, _ in params] != list(expected):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    for name, arr in params:
        target = expected[name]
        if target.shape != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {target.shape}")
        target.data = arr.copy()
        target.grad = np.zeros_like(target.data)
    return model
