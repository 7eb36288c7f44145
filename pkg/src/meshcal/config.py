"""Plain-text ``key = value`` configuration files.

One entry per line, ``#`` starts a comment, keys may repeat (list-valued
keys such as ``node`` or ``obstacle`` rely on this). The same format is used
for scenarios, ranging models and grid-filter parameters.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, TypeVar

from .errors import ConfigError

T = TypeVar("T")


def parse_kv(text: str, source: str = "<string>") -> list[tuple[str, str]]:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        entries.append((key, value))
    return entries


def read_kv(path: str | Path) -> list[tuple[str, str]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return parse_kv(text, str(path))


def _coerce(value: str, kind: Any, key: str) -> Any:
    kind = {"int": int, "float": float, "str": str, "bool": bool}.get(kind, kind)
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot interpret {value!r} as {kind.__name__}") from None


def load_dataclass(cls: type[T], entries: list[tuple[str, str]], **overrides) -> T:
    """Build a flat dataclass from config entries whose keys are its field names."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values: dict[str, Any] = {}
    for key, value in entries:
        if key not in fields:
            raise ConfigError(f"unknown key {key!r}; expected one of {', '.join(fields)}")
        values[key] = _coerce(value, fields[key].type, key)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def dump_dataclass(obj) -> str:
    lines = [f"{f.name} = {getattr(obj, f.name)}" for f in dataclasses.fields(obj)]
    return "\n".join(lines) + "\n"
