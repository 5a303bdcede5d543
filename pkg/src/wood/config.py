"""Flat UTF-8 key=value config files.

Both the dataset generator and the experiment runner are driven by the same
tiny format: one `key = value` per line, `#` starts a comment, blank lines
ignored. Values stay strings here; callers coerce them with the typed
helpers, which raise ConfigError with the key name on bad input.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(Exception):
    """Bad config file or bad value for a known key (CLI exit code 2)."""


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {i}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {i}: empty key")
        if key in out:
            raise ConfigError(f"line {i}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_kv_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    return parse_kv_text(text)


def get_str(kv: dict[str, str], key: str, default: str | None = None) -> str:
    if key in kv:
        return kv[key]
    if default is None:
        raise ConfigError(f"missing required key {key!r}")
    return default


def get_int(kv: dict[str, str], key: str, default: int | None = None) -> int:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return int(kv[key])
    except ValueError:
        raise ConfigError(f"{key}: expected integer, got {kv[key]!r}") from None


def get_float(kv: dict[str, str], key: str, default: float | None = None) -> float:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return float(kv[key])
    except ValueError:
        raise ConfigError(f"{key}: expected number, got {kv[key]!r}") from None


def get_bool(kv: dict[str, str], key: str, default: bool) -> bool:
    if key not in kv:
        return default
    value = kv[key].lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected boolean, got {kv[key]!r}")


def get_list(kv: dict[str, str], key: str, default: list[str] | None = None) -> list[str]:
    """Comma-separated list; empty string means empty list."""
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return list(default)
    raw = kv[key].strip()
    if not raw:
        return []
    return [item.strip() for item in raw.split(",")]


def get_int_list(kv: dict[str, str], key: str, default: list[int] | None = None) -> list[int]:
    items = get_list(kv, key, None if default is None else [str(v) for v in default])
    try:
        return [int(v) for v in items]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {kv[key]!r}") from None


def get_float_list(kv: dict[str, str], key: str, default: list[float] | None = None) -> list[float]:
    items = get_list(kv, key, None if default is None else [str(v) for v in default])
    try:
        return [float(v) for v in items]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {kv[key]!r}") from None


def reject_unknown_keys(kv: dict[str, str], known: set[str]) -> None:
    unknown = sorted(set(kv) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
