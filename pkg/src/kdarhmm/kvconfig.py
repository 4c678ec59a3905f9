"""Flat ``key = value`` text configs with ``#`` comments.

Vectors are comma-separated; matrix rows are separated by ``;``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def format_kv(items: dict[str, object]) -> str:
    lines = []
    for key, value in items.items():
        lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        return value
    arr = np.asarray(value)
    if arr.ndim == 1:
        return ", ".join(format_value(v.item() if hasattr(v, "item") else v) for v in arr)
    if arr.ndim == 2:
        return "; ".join(format_value(row) for row in arr)
    raise ConfigError(f"cannot format value of shape {arr.shape}")


def as_int(d: dict, key: str, default=None) -> int:
    if key not in d:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return default
    try:
        return int(d[key])
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {d[key]!r}") from None


def as_float(d: dict, key: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return default
    try:
        return float(d[key])
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {d[key]!r}") from None


def as_bool(d: dict, key: str, default: bool | None = None) -> bool:
    if key not in d:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return default
    v = d[key].lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {d[key]!r}")


def as_vector(d: dict, key: str, default=None) -> np.ndarray:
    if key not in d:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return np.asarray(default, dtype=np.float64)
    return _parse_vector(d[key], key)


def as_matrix(d: dict, key: str, default=None) -> np.ndarray:
    if key not in d:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return np.asarray(default, dtype=np.float64)
    rows = [_parse_vector(r, key) for r in d[key].split(";")]
    if len({len(r) for r in rows}) != 1:
        raise ConfigError(f"{key}: matrix rows have different lengths")
    return np.vstack(rows)


def as_list(d: dict, key: str, default=None) -> list[str]:
    if key not in d:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return list(default)
    return [s.strip() for s in d[key].split(",") if s.strip()]


def _parse_vector(text: str, key: str) -> np.ndarray:
    parts = [s.strip() for s in text.split(",")]
    try:
        return np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None
