"""Flat ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing

from .errors import ParseError, ParameterError


def read_flat_config(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected 'key = value' in {path}", line=lineno)
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_flat_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


def _coerce(raw, hint):
    if raw is None or isinstance(raw, bool):
        return raw
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw in ("", "None", "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(raw, inner[0]) if inner else raw
    if not isinstance(raw, str):
        return raw
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ParameterError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if origin in (tuple, list) or hint in (tuple, list):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw


def build(cls, values: dict):
    """Instantiate dataclass ``cls`` from string-or-typed ``values``; unknown keys raise."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(values) - names
    if unknown:
        raise ParameterError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, raw in values.items():
        try:
            kwargs[key] = _coerce(raw, hints[key])
        except ValueError as exc:
            raise ParameterError(f"bad value for {key}: {exc}") from None
    return cls(**kwargs)
