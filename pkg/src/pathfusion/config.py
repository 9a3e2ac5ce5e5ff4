"""Plain-text ``key = value`` configuration files.

One file may carry keys for several config dataclasses (scene, preprocess,
model, training); each dataclass picks the keys it knows about.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Mapping, TypeVar

from .errors import ConfigError

T = TypeVar("T")

_SECTION = "config"


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a key-value file.  ``#`` and ``;`` start comments."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#", ";"), interpolation=None
    )
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    return dict(parser[_SECTION])


def write_config(path: str | Path, values: Mapping[str, Any]) -> None:
    lines = [f"{k} = {_format(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def _coerce(name: str, raw: str, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    raw = raw.strip()
    try:
        if origin in (typing.Union, types.UnionType):
            if raw.lower() in ("none", ""):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _coerce(name, raw, inner)
        if origin is tuple:
            parts = [p for p in raw.replace(" ", "").split(",") if p]
            elem = args[0]
            return tuple(_coerce(name, p, elem) for p in parts)
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    raise ConfigError(f"{name}: unsupported field type {hint!r}")


def from_mapping(cls: type[T], values: Mapping[str, str], **overrides: Any) -> T:
    """Build dataclass ``cls`` from string values, ignoring unknown keys.

    Keyword ``overrides`` (already typed) win over file values.
    """
    hints = typing.get_type_hints(cls)
    kwargs: dict[str, Any] = {}
    for f in dataclasses.fields(cls):
        if f.name in overrides and overrides[f.name] is not None:
            kwargs[f.name] = overrides[f.name]
        elif f.name in values:
            kwargs[f.name] = _coerce(f.name, values[f.name], hints[f.name])
    return cls(**kwargs)


def to_mapping(obj: Any) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
