"""``key = value`` configuration files."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from film.features import PyramidConfig
from film.train import TrainConfig, check_crop


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            try:
                return int(raw)
            except ValueError:
                as_float = float(raw)  # allows 3e6
                if not as_float.is_integer():
                    raise
                return int(as_float)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str) -> tuple[PyramidConfig, TrainConfig]:
    """Parse model and training settings; unknown keys are rejected."""
    model_defaults = dataclasses.asdict(PyramidConfig())
    train_defaults = dataclasses.asdict(TrainConfig())
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in model_defaults:
            model_kw[key] = _coerce(key, value, model_defaults[key])
        elif key in train_defaults:
            train_kw[key] = _coerce(key, value, train_defaults[key])
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    try:
        model, train = PyramidConfig(**model_kw), TrainConfig(**train_kw)
        check_crop(model, train)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return model, train


def load_config(path) -> tuple[PyramidConfig, TrainConfig]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(model: PyramidConfig, train: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(model).items()]
    lines += [f"{k} = {v}" for k, v in dataclasses.asdict(train).items()]
    return "\n".join(lines) + "\n"
