"""Experiment configuration and the dotted key/value file format.

A config file holds one ``key = value`` pair per line, e.g.::

    regime = s2d
    steps = 5000
    s2d.strength = 5e-4
    quant.eval_bits = ["W8A8", "W4A4"]

Values are parsed as JSON when possible (numbers, booleans, lists, quoted
strings) and taken verbatim otherwise. ``#`` starts a comment. Every field has
a default, so an empty file is a valid configuration.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .quant import parse_bits
from .regularizer import S2DConfig
from .tasks import SyntheticTask

REGIMES = ("baseline", "s2d", "qat", "qat_s2d")
SEED_ENV = "S2D_SEED"
# short symbol names accepted in files, --set and --grid
ALIASES = {
    "s2d.n": "s2d.power",
    "s2d.lambda": "s2d.strength",
    "s2d.tau": "s2d.pcdr_threshold",
    "s2d.m": "s2d.refresh_interval",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (128, 128)
    init_scale: float = 2e-4
    attention_tokens: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if any(h < 1 for h in self.hidden):
            raise ConfigError("model.hidden: widths must be positive")
        if self.attention_tokens < 0:
            raise ConfigError("model.attention_tokens must be >= 0")
        if self.loss not in ("mse", "xent"):
            raise ConfigError("model.loss: allowed values are 'mse', 'xent'")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 64


@dataclass(frozen=True)
class QuantConfig:
    w_bits: int = 4
    a_bits: int = 4
    warmup_steps: int = 0
    eval_bits: tuple[str, ...] = ("W8A8", "W4A4")
    calibration_size: int = 256
    calibration_seed: int | None = None

    def __post_init__(self):
        for b in (self.w_bits, self.a_bits):
            if b != 64 and not 2 <= b <= 8:
                raise ConfigError(f"quant bits must lie in [2, 8] (64 = passthrough), got {b}")
        for text in self.eval_bits:
            try:
                parse_bits(text)
            except ValueError as exc:
                raise ConfigError(f"quant.eval_bits: {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    regime: str = "baseline"
    seed: int = 1
    steps: int = 5000
    log_interval: int = 100
    task: SyntheticTask = field(default_factory=SyntheticTask)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    s2d: S2DConfig = field(default_factory=S2DConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime: {self.regime!r} not allowed; allowed values are {', '.join(REGIMES)}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")

    @property
    def uses_s2d(self) -> bool:
        return self.regime in ("s2d", "qat_s2d")

    @property
    def uses_qat(self) -> bool:
        return self.regime in ("qat", "qat_s2d")

    @property
    def task_seed(self) -> int:
        return self.seed

    @property
    def calibration_seed(self) -> int:
        q = self.quant.calibration_seed
        return self.seed + 2 if q is None else q

    def resolved_task(self) -> SyntheticTask:
        return dataclasses.replace(self.task, seed=self.task_seed)

    def dims(self) -> list[int]:
        return [self.task.input_dim, *self.model.hidden, self.task.output_dim]

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        del d["task"]["seed"]
        return d


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "task": SyntheticTask,
    "model": ModelConfig,
    "optim": OptimConfig,
    "s2d": S2DConfig,
    "quant": QuantConfig,
}


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        lowered = text.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        if lowered in ("none", "null"):
            return None
        return text


def parse_config_text(text: str) -> dict[str, object]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _coerce(cls, name: str, value):
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[name]
    if isinstance(value, list):
        return tuple(value)
    if "float" in str(ftype) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def build_config(flat: dict[str, object] | None = None, env: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a config from dotted keys; ``S2D_SEED`` in ``env`` overrides ``seed``."""
    flat = dict(flat or {})
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        flat["seed"] = _env_seed(env[SEED_ENV])
    for alias, target in ALIASES.items():
        if alias in flat:
            if target in flat:
                raise ConfigError(f"{alias!r} and {target!r} name the same field; give only one")
            flat[target] = flat.pop(alias)
    top, sections = {}, {name: {} for name in _SECTIONS}
    top_fields = [f for f in _field_names(ExperimentConfig) if f not in _SECTIONS]
    for key, value in flat.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section {section!r} in {key!r}; allowed: {', '.join(_SECTIONS)}")
            allowed = _field_names(_SECTIONS[section])
            if key == "task.seed":
                raise ConfigError("task.seed is derived from the top-level 'seed'; set 'seed' instead")
            if name not in allowed:
                raise ConfigError(f"unknown field {key!r}; allowed values are {', '.join(f'{section}.{a}' for a in allowed)}")
            sections[section][name] = _coerce(_SECTIONS[section], name, value)
        else:
            if key not in top_fields:
                raise ConfigError(f"unknown field {key!r}; allowed values are {', '.join(top_fields)}")
            top[key] = value
    try:
        parts = {name: cls(**sections[name]) for name, cls in _SECTIONS.items()}
        return ExperimentConfig(**top, **parts)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides: dict[str, object] | None = None, env=None) -> ExperimentConfig:
    """File values, then ``S2D_SEED`` from ``env``, then ``overrides`` (highest precedence)."""
    flat = {} if path is None else parse_config_text(Path(path).read_text(encoding="utf-8"))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        flat["seed"] = _env_seed(env[SEED_ENV])
    flat.update(overrides or {})
    return build_config(flat, env={})


def _env_seed(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {text!r}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    """Inverse of ``ExperimentConfig.to_dict`` (used when reading reports)."""
    flat = {}
    for key, value in d.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    return build_config(flat, env={})


def flatten(cfg: ExperimentConfig) -> dict[str, object]:
    flat = {}
    for key, value in cfg.to_dict().items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    return flat
