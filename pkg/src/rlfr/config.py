"""Flat ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored.  Keys may use dashes or
underscores interchangeably.  Values stay strings here; the CLI converts them
with the same types it uses for its flags, so a file entry and the matching
flag are interchangeable.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Callable, Mapping

from .corpus import ConfigError


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_flat(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_flat(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_flat(path.read_text(encoding="utf-8"), str(path))


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_flat(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values))


def resolve(
    flags: Mapping[str, Any],
    file_values: Mapping[str, str],
    defaults: Mapping[str, Any],
    types: Mapping[str, Callable[[str], Any]],
) -> dict[str, Any]:
    """Merge with precedence flags > file > defaults.

    An empty value in the file means "unset" (``None``).
    """
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = dict(defaults)
    for key, raw in file_values.items():
        if raw == "":
            out[key] = None
            continue
        try:
            out[key] = types[key](raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
    out.update(flags)
    return out
