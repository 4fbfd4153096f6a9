"""Flat ``key = value`` configuration files shared by every module.

Each parameter dataclass declares its keys through field metadata
(``help`` and ``units``).  A single file may carry keys for several
dataclasses; :func:`build` picks the subset a dataclass understands.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError


def param(default, help: str, units: str = "-", **kw):
    """Dataclass field carrying config documentation."""
    return dataclasses.field(default=default, metadata={"help": help, "units": units}, **kw)


def parse_text(text: str) -> dict[str, str]:
    """Parse sectionless ``key = value`` lines; ``#`` starts a comment."""
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",), interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string("[_]\n" + text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"line {exc.lineno - 1}: duplicate key {exc.option!r}") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"line {lineno - 1}: expected 'key = value', got {line}") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return dict(cp["_"])


def read(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_text(p.read_text())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def dump(mapping: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in mapping.items())


def write(path, mapping: dict) -> None:
    Path(path).write_text(dump(mapping))


def _coerce(key: str, raw: str, typ):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            inner = [a for a in args if a is not type(None)][0]
            if raw.lower() in ("none", ""):
                return None
            return _coerce(key, raw, inner)
        if origin in (tuple, list):
            inner = args[0]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_coerce(key, s, inner) for s in items)
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw, 0)
        if typ is float:
            return float(raw)
        return raw
    except (ValueError, IndexError):
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {typ}") from None


def keys_of(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def build(cls, mapping: dict, **overrides):
    """Instantiate ``cls`` from the keys of ``mapping`` it declares."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in overrides:
            kwargs[f.name] = overrides[f.name]
        elif f.name in mapping:
            raw = mapping[f.name]
            kwargs[f.name] = _coerce(f.name, raw, hints[f.name]) if isinstance(raw, str) else raw
    return cls(**kwargs)


def to_mapping(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def check_known(mapping: dict, classes) -> None:
    valid = sorted({k for c in classes for k in keys_of(c)})
    unknown = sorted(set(mapping) - set(valid))
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {', '.join(map(repr, unknown))}; valid keys: {', '.join(valid)}"
        )


def describe(classes) -> str:
    """One line per key with units, default and help, for CLI help text."""
    lines = []
    for cls in classes:
        lines.append(f"[{cls.__name__}]")
        for f in dataclasses.fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            units = f.metadata.get("units", "-")
            lines.append(
                f"  {f.name} ({units}, default {format_value(default)}): {f.metadata.get('help', '')}"
            )
    return "\n".join(lines)
