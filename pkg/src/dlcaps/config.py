"""Flat ``key = value`` config files mapped onto nested dataclasses.

Nested dataclass fields become dotted keys (``mlce.capssum1.out_dim = 8``),
tuples are comma separated, booleans are ``true``/``false``.  Lines starting
with ``#`` and trailing ``# ...`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any

from .errors import ConfigurationError


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        entries[key] = value
    return entries


def read_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_text(text, str(path))


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_flat(obj, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = _format(value)
    return out


def dumps(obj) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(obj).items())


def _parse_scalar(kind, text: str, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    raise ConfigurationError(f"{key}: unsupported field type {kind}")


def _parse_value(hint, text: str, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text.lower() == "none":
            return None
        return _parse_value(inner[0], text, key)
    if origin in (tuple, list):
        elem = args[0] if args else str
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(elem, p, key) for p in parts)
    return _parse_scalar(hint, text, key)


def apply(obj, entries: dict[str, str], strict: bool = True):
    """Return a copy of ``obj`` with the dotted ``entries`` applied."""
    obj = _deepcopy(obj)
    unknown = []
    for key, text in entries.items():
        if not _set(obj, key.split("."), text, key):
            unknown.append(key)
    if unknown and strict:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    _revalidate(obj)
    return obj


def _set(obj, parts, text, key) -> bool:
    names = {f.name for f in dataclasses.fields(obj)}
    head = parts[0]
    if head not in names:
        return False
    value = getattr(obj, head)
    if dataclasses.is_dataclass(value):
        return len(parts) > 1 and _set(value, parts[1:], text, key)
    if len(parts) != 1:
        return False
    setattr(obj, head, _parse_value(_hints(type(obj))[head], text, key))
    return True


def _deepcopy(obj):
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            changes[f.name] = _deepcopy(value)
    return dataclasses.replace(obj, **changes)


def _revalidate(obj):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            _revalidate(value)
    post = getattr(obj, "__post_init__", None)
    if post is not None:
        post()


def loads(cls, text: str, source: str = "<config>"):
    return apply(cls(), parse_text(text, source))


def keys(obj) -> list[str]:
    return list(to_flat(obj))
