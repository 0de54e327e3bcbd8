"""Flat ``key = value`` configuration files.

Keys name fields of :class:`ModelConfig`, :class:`ScheduleConfig` or
:class:`StageConfig`. A key prefixed with a stage id (``1a.steps = 2000``)
applies only when that stage runs and overrides the unprefixed value.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .backbone import ModelConfig
from .checkpoint import STAGE_ORDER, ScheduleConfig
from .training import StageConfig

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
SCHEDULE_KEYS = {f.name for f in fields(ScheduleConfig)}
STAGE_KEYS = set(StageConfig.field_names()) - {"stage_id"}


class ConfigError(ValueError):
    pass


def _scalar(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_scalar(p.strip()) for p in text.split(",") if p.strip())
    return _scalar(text)


def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = parse_value(value)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def resolve(raw: dict, stage: str) -> tuple[ModelConfig, ScheduleConfig, StageConfig]:
    """Split a parsed file into model, schedule and stage configs for ``stage``."""
    merged = {}
    for key, value in raw.items():
        if "." in key:
            prefix, _, name = key.partition(".")
            if prefix not in STAGE_ORDER:
                raise ConfigError(f"unknown stage prefix in {key!r}")
            continue
        merged[key] = value
    for key, value in raw.items():
        prefix, dot, name = key.partition(".")
        if dot and prefix == stage:
            merged[name] = value
    unknown = set(merged) - MODEL_KEYS - SCHEDULE_KEYS - STAGE_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        model = ModelConfig(**{k: _tuple_if(k, v) for k, v in merged.items() if k in MODEL_KEYS})
        schedule = ScheduleConfig(**{k: v for k, v in merged.items() if k in SCHEDULE_KEYS})
        stage_cfg = StageConfig(stage_id=stage, **{k: v for k, v in merged.items() if k in STAGE_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return model, schedule, stage_cfg


def _tuple_if(key, value):
    if key in ("vae_channels", "unet_channels", "attention_levels") and not isinstance(value, tuple):
        return () if value is None else (value,)
    return value


def dump_config(values: dict) -> str:
    """Render ``values`` as sorted ``key = value`` lines."""
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, (list, tuple)):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
