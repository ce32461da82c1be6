"""Flat ``key = value`` text configs mapped onto dataclasses.

Format: one assignment per line, ``#`` starts a comment, blank lines ignored.
Keys may carry a section prefix (``train.epochs = 15``). Values are parsed
according to the target dataclass field's annotation.
"""
from __future__ import annotations

import dataclasses
import math
import typing
from typing import Any, Dict, Mapping

from .errors import ConfigError


def parse_kv(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def dump_kv(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    if hasattr(v, "value"):  # Enum
        return str(v.value)
    return str(v)


def _parse_scalar(tp, text: str, key: str):
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            value = float(text)
            if math.isnan(value):
                raise ValueError(text)
            return value
        if tp is str:
            return text
        if isinstance(tp, type) and issubclass(tp, str):  # str-valued Enum
            return tp(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def parse_value(tp, text: str, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if text.strip().lower() in ("none", "") and type(None) in args:
            return None
        return parse_value(inner[0], text, key)
    if origin in (list, tuple):
        items = [t for t in text.split(",") if t.strip()]
        elem = args[0] if args else str
        parsed = [parse_value(elem, t, key) for t in items]
        return tuple(parsed) if origin is tuple else parsed
    return _parse_scalar(tp, text, key)


def apply_kv(cls, values: Mapping[str, str], base=None, prefix: str = ""):
    """Build ``cls`` (a dataclass) from string values, starting from ``base`` or defaults.

    Unknown keys under ``prefix`` raise :class:`ConfigError`.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    updates = {}
    for key, text in values.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        updates[key] = parse_value(hints[key], text, prefix + key)
    obj = base if base is not None else cls()
    return dataclasses.replace(obj, **updates)


def to_kv(obj, prefix: str = "") -> Dict[str, Any]:
    return {prefix + f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.init}
