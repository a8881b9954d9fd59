"""
JSON configuration files and command-line overrides.

A config file is one JSON object whose keys mirror ExperimentSpec; nested
objects mirror the nested dataclasses. See docs/config.md.
"""

import dataclasses
import enum
import json
import logging
import typing
from pathlib import Path
from typing import Any, Dict, Optional, Union

from prunetape.exceptions import ConfigError
from prunetape.schemas import ArchitectureSpec, CostModel, ExperimentSpec, SurrogateKind

logger = logging.getLogger(__name__)


def _convert(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return tuple(_convert(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {type(value).__name__}")
        return _build(hint, value, where)
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(value)
        except ValueError:
            choices = ", ".join(m.value for m in hint)
            raise ConfigError(f"{where}: {value!r} is not one of {choices}") from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: Any, data: Dict[str, Any], where: str) -> Any:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {name: _convert(value, hints[name], f"{where}.{name}") for name, value in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def experiment_spec_from_dict(data: Dict[str, Any]) -> ExperimentSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"A config must be a JSON object, got {type(data).__name__}")
    return _build(ExperimentSpec, data, "config")


def load_experiment_spec(path: Union[str, Path]) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    spec = experiment_spec_from_dict(data)
    logger.debug(f"Loaded config {path}")
    return spec


def apply_overrides(
    spec: ExperimentSpec,
    seed: Optional[int] = None,
    lam: Optional[float] = None,
    surrogate: Optional[str] = None,
    cost: Optional[str] = None,
    table: Optional[str] = None,
    out_dir: Optional[str] = None,
) -> ExperimentSpec:
    """Command-line flags win over the JSON file."""
    train = spec.train
    regularizer = train.regularizer
    try:
        if seed is not None:
            train = dataclasses.replace(train, seed=seed)
        if lam is not None:
            regularizer = dataclasses.replace(regularizer, lam=lam)
        if surrogate is not None:
            regularizer = dataclasses.replace(regularizer, surrogate=SurrogateKind(surrogate))
        if cost is not None:
            regularizer = dataclasses.replace(regularizer, cost=CostModel(cost))
        train = dataclasses.replace(train, regularizer=regularizer)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    changes: Dict[str, Any] = {"train": train}
    if table is not None:
        changes["table_path"] = table
    if out_dir is not None:
        changes["out_dir"] = out_dir
    return dataclasses.replace(spec, **changes)


def spec_to_dict(spec: Any) -> Any:
    """JSON-ready view of a (nested) config dataclass."""
    if dataclasses.is_dataclass(spec):
        return {f.name: spec_to_dict(getattr(spec, f.name)) for f in dataclasses.fields(spec)}
    if isinstance(spec, enum.Enum):
        return spec.value
    if isinstance(spec, tuple):
        return [spec_to_dict(v) for v in spec]
    return spec


def architecture_from_dict(data: Dict[str, Any]) -> ArchitectureSpec:
    return _build(ArchitectureSpec, data, "architecture")
