"""Plain-text ``key = value`` configuration files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing

from .errors import InvalidArgument


def parse_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; blank lines are skipped."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InvalidArgument(f"line {n}: empty key")
        if key in out:
            raise InvalidArgument(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_weights(value: str) -> dict[str, float]:
    """``MTM:3,MPM:1`` -> {"MTM": 3.0, "MPM": 1.0}."""
    out = {}
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise InvalidArgument(f"bad weight entry {item!r}")
        k, v = item.split(":", 1)
        out[k.strip()] = float(v)
    return out


def format_weights(w: dict[str, float]) -> str:
    return ",".join(f"{k}:{v:g}" for k, v in w.items())


def _convert(value: str, tp) -> typing.Any:
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidArgument(f"bad boolean {value!r}")
    if tp is int:
        return int(value)
    if tp is float:
        return float(value)
    if tp is str:
        return value
    if typing.get_origin(tp) is dict:
        return parse_weights(value)
    raise InvalidArgument(f"unsupported field type {tp}")


def apply(cls, values: dict[str, str], base=None, strict: bool = True):
    """Build ``cls`` from string values; unknown keys raise when ``strict``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise InvalidArgument(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in values.items():
        if k in names:
            try:
                kwargs[k] = _convert(v, hints[k])
            except ValueError as e:
                raise InvalidArgument(f"bad value for {k}: {e}") from e
    base = base if base is not None else cls()
    return dataclasses.replace(base, **kwargs)


def to_text(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name} = {format_weights(v) if isinstance(v, dict) else v}")
    return "\n".join(lines) + "\n"
