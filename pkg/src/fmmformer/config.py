"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored, keys are case-sensitive and may
appear once. Values stay strings here; typed coercion happens in the
consumer (``TrainConfig.from_dict``) so errors can name the offending key.
"""
from __future__ import annotations

from pathlib import Path


class ConfigFileError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ConfigValues(dict):
    """Parsed values plus the line each key came from."""

    def __init__(self, *args, path=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.path = path
        self.lines: dict[str, int] = {}

    def error(self, key: str, message: str) -> ConfigFileError:
        return ConfigFileError(f"{key}: {message}", self.path, self.lines.get(key))


def parse_config_text(text: str, path=None) -> ConfigValues:
    out = ConfigValues(path=path)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not key.replace("_", "").isalnum():
            raise ConfigFileError(f"bad key {key!r}", path, lineno)
        if key in out:
            raise ConfigFileError(f"duplicate key {key!r}", path, lineno)
        out[key] = value
        out.lines[key] = lineno
    return out


def read_config(path) -> ConfigValues:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config ({exc.strerror})", path) from exc
    return parse_config_text(text, path)


def format_config(values: dict) -> str:
    """Inverse of ``parse_config_text`` for scalar values."""
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
