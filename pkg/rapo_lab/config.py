"""Reading training configuration from YAML with CLI overrides."""

from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import yaml
from hotlog import get_logger
from pydantic import ValidationError

from rapo_lab.models import SweepConfig, TrainConfig

logger = get_logger(__name__)

DEFAULT_CONFIG_FILENAME = 'rapo_lab.config.yaml'
OUTPUT_ROOT_ENV = 'RAPO_LAB_OUT'


class RapoConfigError(RuntimeError):
    """Raised when rapo_lab configuration is invalid."""


def _load_yaml_config(config_path: Path) -> dict[str, Any]:
    if not config_path.exists():
        msg = f'configuration file not found: {config_path}'
        raise RapoConfigError(msg)

    logger.debug('loading_config', config=str(config_path))
    try:
        with config_path.open() as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        msg = f'failed to parse YAML: {exc}'
        raise RapoConfigError(msg) from exc

    if not isinstance(data, dict):
        msg = f'configuration root must be a mapping in {config_path}'
        raise RapoConfigError(msg)

    return data


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``key=value`` and decode the value as a YAML scalar."""
    key, sep, raw = text.partition('=')
    key = key.strip()
    if not sep or not key:
        msg = f'override must look like key=value, got "{text}"'
        raise RapoConfigError(msg)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        msg = f'could not parse value of override "{text}"'
        raise RapoConfigError(msg) from exc
    return key, value


def apply_overrides(data: Mapping[str, Any], overrides: Iterable[tuple[str, Any]]) -> dict[str, Any]:
    """Return a copy of ``data`` with dotted-key overrides applied."""
    merged: dict[str, Any] = {key: dict(value) if isinstance(value, Mapping) else value for key, value in data.items()}
    for key, value in overrides:
        *parents, leaf = key.split('.')
        target = merged
        for parent in parents:
            child = target.setdefault(parent, {})
            if not isinstance(child, dict):
                msg = f'override "{key}" descends into non-mapping "{parent}"'
                raise RapoConfigError(msg)
            target = child
        target[leaf] = value
    return merged


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        location = '.'.join(str(item) for item in error['loc']) or '<root>'
        parts.append(f'{location}: {error["msg"]}')
    return '; '.join(parts)


def load_train_config(
    config_path: Path | None = None,
    *,
    overrides: Iterable[tuple[str, Any]] = (),
    flags: Mapping[str, Any] | None = None,
) -> TrainConfig:
    """Resolve a TrainConfig from file, ``--set`` overrides and flags.

    Later sources win: built-in defaults, then the file, then overrides,
    then explicit flags whose value is not None.
    """
    data: dict[str, Any] = _load_yaml_config(config_path) if config_path is not None else {}
    data = apply_overrides(data, overrides)
    explicit = [(key, value) for key, value in (flags or {}).items() if value is not None]
    data = apply_overrides(data, explicit)

    try:
        config = TrainConfig.model_validate(data)
    except ValidationError as exc:
        logger.debug('config_validation_failed', errors=exc.errors())
        msg = f'invalid training configuration: {_format_errors(exc)}'
        raise RapoConfigError(msg) from exc

    logger.debug('config_resolved', _verbose_config=config.model_dump())
    return config


def build_sweep_config(values: Mapping[str, Any]) -> SweepConfig:
    """Validate sweep settings, ignoring entries left as None."""
    data = {key: value for key, value in values.items() if value is not None}
    try:
        return SweepConfig.model_validate(data)
    except ValidationError as exc:
        msg = f'invalid sweep configuration: {_format_errors(exc)}'
        raise RapoConfigError(msg) from exc


__all__ = [
    'DEFAULT_CONFIG_FILENAME',
    'OUTPUT_ROOT_ENV',
    'RapoConfigError',
    'apply_overrides',
    'build_sweep_config',
    'load_train_config',
    'parse_override',
]
