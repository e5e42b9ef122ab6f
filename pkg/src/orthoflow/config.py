"""Structured-text configuration: TOML files, ``key=value`` overrides, echo."""

from __future__ import annotations

import math

import tomli

from .errors import ConfigError


def parse_value(text):
    """Interpret an override value with TOML scalar rules, falling back to a string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_file(path):
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return flatten(data)


def flatten(data):
    """Merge sections into one flat namespace; section names are organisational."""
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            for sub, v in flatten(value).items():
                if sub in flat:
                    raise ConfigError(f"duplicate key {sub!r} across sections")
                flat[sub] = v
        else:
            flat[key] = value
    return flat


def parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not KEY=VALUE")
        key, value = pair.split("=", 1)
        key = key.strip().rsplit(".", 1)[-1]
        if not key:
            raise ConfigError(f"override {pair!r} has an empty key")
        out[key] = parse_value(value.strip())
    return out


def resolve(defaults, file_values=None, overrides=None):
    """defaults < file < overrides; unknown keys are rejected."""
    cfg = dict(defaults)
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in defaults:
                raise ConfigError(f"unknown configuration key {key!r}")
            cfg[key] = _coerce(key, defaults[key], value)
    return cfg


def _coerce(key, default, value):
    if isinstance(value, bool) and not isinstance(default, bool) and default is not None:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got a boolean")
    if default is None or isinstance(value, type(default)):
        return value
    if isinstance(default, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(default, list) and isinstance(value, (int, float)):
        return [value]
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    if value is None:
        return '""'
    raise ConfigError(f"cannot serialise {value!r}")


def dumps(cfg, section="config"):
    lines = [f"[{section}]"]
    for key in sorted(cfg):
        lines.append(f"{key} = {_format(cfg[key])}")
    return "\n".join(lines) + "\n"
