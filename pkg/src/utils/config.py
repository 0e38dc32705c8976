"""
TOML configuration loading for the typed config dataclasses.

Tables map to nested dataclasses, arrays to tuples, strings to enums. Keys
that the target dataclass does not declare are rejected, as are values
whose type does not match the field annotation. ``FLEXICT_SEED`` in the
environment overrides a top-level ``seed`` field.
"""

import dataclasses
from enum import Enum
import logging
import os
from pathlib import Path
import sys
import typing
from typing import Any, Dict, Type, TypeVar, Union

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..core.errors import ConfigError

logger = logging.getLogger(__name__)

SEED_ENV = "FLEXICT_SEED"

T = TypeVar("T")


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(value: Any, tp, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if tp is Any:
        return value
    if origin is Union:
        if value is None and type(None) in args:
            return None
        for arg in (a for a in args if a is not type(None)):
            try:
                return _coerce(value, arg, key)
            except ConfigError:
                continue
        raise ConfigError(f"{key}: expected {_type_name(tp)}, got {value!r}", key, _type_name(tp))
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a table for {tp.__name__}, got {value!r}", key, tp.__name__)
        return _build(tp, value, prefix=f"{key}.")
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected an array, got {value!r}", key, _type_name(tp))
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{key}: expected {len(args)} items, got {len(value)}", key, _type_name(tp))
            return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        item = args[0] if args else Any
        items = [_coerce(v, item, f"{key}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a table, got {value!r}", key, "dict")
        return dict(value)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            choices = [m.value for m in tp]
            raise ConfigError(f"{key}: expected one of {choices}, got {value!r}", key, tp.__name__) from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}", key, "bool")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {value!r}", key, "int")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {value!r}", key, "float")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected str, got {value!r}", key, "str")
        return value
    return value


def _build(cls: Type[T], data: Dict[str, Any], prefix: str = "") -> T:
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        key = f"{prefix}{unknown[0]}"
        raise ConfigError(f"Unknown key {key!r} for {cls.__name__}; allowed: {sorted(fields)}",
                          key, "one of " + ", ".join(sorted(fields)))
    kwargs = {name: _coerce(value, hints[name], f"{prefix}{name}") for name, value in data.items()}
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any], cls: Type[T]) -> T:
    """Typed instance of ``cls`` from a plain mapping, with the seed override applied."""
    data = dict(data)
    override = os.environ.get(SEED_ENV)
    if override is not None and "seed" in {f.name for f in dataclasses.fields(cls)}:
        try:
            data["seed"] = int(override)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {override!r}", SEED_ENV, "int") from None
        logger.info("Seed overridden from %s: %d", SEED_ENV, data["seed"])
    return _build(cls, data)


def load_config(path: Union[str, Path], cls: Type[T]) -> T:
    """Read a TOML file into ``cls``; an empty file gives all defaults.

    Raises:
        ConfigError: Unknown key, wrong type or unparsable TOML
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})", str(path), "TOML") from e
    return config_from_dict(data, cls)


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)
                if f.init and getattr(value, f.name) is not None}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items() if v is not None}
    return value


def config_to_dict(obj: Any) -> Dict[str, Any]:
    """TOML-ready mapping; ``None`` fields are left out."""
    return _plain(obj)


def dump_config(obj: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        tomli_w.dump(config_to_dict(obj), f)
    return path
