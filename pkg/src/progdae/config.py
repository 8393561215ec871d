"""Plain-text run configuration: parsing, typed binding, and run metadata.

Config files are line-oriented ``key = value`` pairs.  Blank lines and
lines starting with ``#`` are ignored.  Nested dataclass fields are
addressed with a dotted prefix (``model.latent_dim = 32``).  Tuples are
comma-separated.  The same parsed mapping feeds the run-metadata hash so
a run directory records exactly the configuration that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import typing

__all__ = [
    "ConfigError",
    "parse_config",
    "load_config",
    "build_dataclass",
    "config_hash",
    "write_run_metadata",
    "RUN_METADATA_NAME",
]

RUN_METADATA_NAME = "run_metadata.json"


class ConfigError(ValueError):
    """Malformed config text or values that do not fit the target schema."""


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines into an ordered string mapping."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def load_config(path: str) -> dict[str, str]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=path)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(value: str, annot, key: str):
    origin = typing.get_origin(annot)
    if annot is int:
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected integer, got {value!r}") from exc
    if annot is float:
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected number, got {value!r}") from exc
    if annot is bool:
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected boolean, got {value!r}")
    if annot is str:
        return value
    if origin is tuple:
        args = typing.get_args(annot)
        items = [v.strip() for v in value.split(",") if v.strip()]
        if not items:
            raise ConfigError(f"{key}: expected comma-separated values, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            elem_types = [args[0]] * len(items)
        else:
            if len(items) != len(args):
                raise ConfigError(
                    f"{key}: expected {len(args)} comma-separated values, got {len(items)}"
                )
            elem_types = list(args)
        return tuple(
            _coerce(item, etype, f"{key}[{i}]")
            for i, (item, etype) in enumerate(zip(items, elem_types))
        )
    raise ConfigError(f"{key}: unsupported config field type {annot!r}")


def build_dataclass(cls, pairs: dict[str, str], prefix: str = ""):
    """Construct a dataclass from string pairs, coercing values by field type.

    Keys not matching any field (including nested ``sub.field`` paths) are
    rejected so typos fail loudly instead of silently keeping defaults.
    """
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls!r} is not a dataclass")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    consumed: set[str] = set()
    for f in dataclasses.fields(cls):
        annot = hints[f.name]
        full = prefix + f.name
        if dataclasses.is_dataclass(annot):
            sub_prefix = full + "."
            sub_keys = {k for k in pairs if k.startswith(sub_prefix)}
            if sub_keys:
                value, sub_consumed = _build_nested(annot, pairs, sub_prefix)
                kwargs[f.name] = value
                consumed |= sub_consumed
            continue
        if full in pairs:
            kwargs[f.name] = _coerce(pairs[full], annot, full)
            consumed.add(full)
    if prefix == "":
        unknown = sorted(set(pairs) - consumed)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration for {cls.__name__}: {exc}") from exc


def _build_nested(cls, pairs: dict[str, str], prefix: str):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    consumed: set[str] = set()
    for f in dataclasses.fields(cls):
        full = prefix + f.name
        annot = hints[f.name]
        if dataclasses.is_dataclass(annot):
            sub_prefix = full + "."
            if any(k.startswith(sub_prefix) for k in pairs):
                value, sub_consumed = _build_nested(annot, pairs, sub_prefix)
                kwargs[f.name] = value
                consumed |= sub_consumed
            continue
        if full in pairs:
            kwargs[f.name] = _coerce(pairs[full], annot, full)
            consumed.add(full)
    try:
        return cls(**kwargs), consumed
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration for {cls.__name__}: {exc}") from exc


def config_hash(pairs: dict[str, str]) -> str:
    """Stable hash of a parsed config: sha256 over sorted key=value lines."""
    canon = "".join(f"{k}={pairs[k]}\n" for k in sorted(pairs))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def write_run_metadata(
    out_dir: str,
    *,
    command: str,
    seed: int,
    config_pairs: dict[str, str] | None = None,
    argv: list[str] | None = None,
    extra: dict | None = None,
) -> str:
    """Record what produced a run directory: config hash, seed, versions.

    Deliberately timestamp-free so identical runs produce identical
    metadata files.
    """
    import numpy
    import torch

    from . import __version__

    meta = {
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "seed": int(seed),
        "config": dict(config_pairs) if config_pairs else {},
        "config_hash": config_hash(config_pairs or {}),
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": numpy.__version__,
            "torch": torch.__version__,
        },
    }
    if extra:
        meta["extra"] = extra
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RUN_METADATA_NAME)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
