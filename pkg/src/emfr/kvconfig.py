"""Plain-text `key = value` configuration files, shared by every subcommand."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    """Parse `key = value` lines; blank lines and `#` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def write_kv(mapping: dict[str, object], path: str | Path) -> None:
    lines = [f"{key} = {value}" for key, value in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def get_str(mapping: dict[str, str], key: str, default: str | None = None) -> str:
    if key in mapping:
        return mapping[key]
    if default is None:
        raise ConfigError(f"missing required key {key!r}")
    return default


def get_int(mapping: dict[str, str], key: str, default: int | None = None) -> int:
    if key not in mapping:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return int(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected integer, got {mapping[key]!r}") from exc


def get_float(mapping: dict[str, str], key: str, default: float | None = None) -> float:
    if key not in mapping:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return float(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected number, got {mapping[key]!r}") from exc


def get_bool(mapping: dict[str, str], key: str, default: bool | None = None) -> bool:
    if key not in mapping:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    value = mapping[key].lower()
    if value in {"1", "true", "yes", "on"}:
        return True
    if value in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"key {key!r}: expected boolean, got {mapping[key]!r}")
