"""Flat ``key = value`` config files: diff-able experiment provenance."""

from __future__ import annotations


class ConfigError(ValueError):
    """A config file or value could not be parsed."""


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key in {raw!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return parse_kv_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def write_kv(path, mapping: dict[str, object]) -> None:
    lines = [f"{key} = {value}" for key, value in mapping.items()]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def get_typed(mapping: dict[str, str], key: str, convert, default=None):
    if key not in mapping:
        if default is not None:
            return default
        raise ConfigError(f"missing required config key {key!r}")
    try:
        return convert(mapping[key])
    except ValueError:
        raise ConfigError(f"config key {key!r} has malformed value {mapping[key]!r}") from None
