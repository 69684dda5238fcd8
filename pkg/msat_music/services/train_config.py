# msat_music/services/train_config.py
"""Flat key=value training configuration.

    # comments and blank lines are ignored
    learning_rate=0.001
    fusion=global

Every dataclass field is a key; anything else raises UnknownConfigKey.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping

from .neural_core import FUSION_MODES, ModelConfig
from .representation import SCALES

FROZEN_CONTEXT_ALIGNED = "aligned"
FROZEN_CONTEXT_PREFIX = "prefix"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class UnknownConfigKey(ValueError):
    pass


class ConfigValueError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 1.0
    batch_size: int = 1
    max_steps: int = 2000
    max_seq_len: int = 1024
    seed: int = 0
    fusion: str = "global"
    target_scale: str = "bar"
    valid_every: int = 100
    checkpoint_path: str = ""
    log_path: str = ""
    init_bar_from_pretrained: bool = True
    frozen_context: str = FROZEN_CONTEXT_ALIGNED
    d_model: int = 64
    token_width: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256

    def __post_init__(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ConfigValueError(f"fusion must be one of {', '.join(FUSION_MODES)}, got {self.fusion!r}")
        if self.target_scale not in SCALES:
            raise ConfigValueError(f"target_scale must be one of {', '.join(SCALES)}, got {self.target_scale!r}")
        if self.frozen_context not in (FROZEN_CONTEXT_ALIGNED, FROZEN_CONTEXT_PREFIX):
            raise ConfigValueError(f"frozen_context must be aligned or prefix, got {self.frozen_context!r}")
        if self.batch_size < 1 or self.valid_every < 1:
            raise ConfigValueError("batch_size and valid_every must be >= 1")
        if self.max_steps < 0:
            raise ConfigValueError("max_steps must be >= 0")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ConfigValueError("learning_rate and grad_clip must be > 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            token_width=self.token_width,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            max_len=self.max_seq_len,
        )

    def with_overrides(self, overrides: Mapping[str, Any]) -> "TrainConfig":
        return replace(self, **coerce_values({k: v for k, v in overrides.items() if v is not None}))

    def to_text(self) -> str:
        """The effective config, itself loadable by `load_train_config`."""
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    if not isinstance(value, str):
        return value
    value = value.strip()
    try:
        if kind == "bool":
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigValueError(f"{key}: cannot read {value!r} as {kind}") from None
    return value


def coerce_values(values: Mapping[str, Any]) -> Dict[str, Any]:
    out = {}
    for k, v in values.items():
        if k not in _FIELD_TYPES:
            raise UnknownConfigKey(f"unknown config key {k!r}")
        out[k] = _coerce(k, v)
    return out


def parse_config_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigValueError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_train_config(path: Path | str | None = None, overrides: Mapping[str, Any] | None = None) -> TrainConfig:
    values: Dict[str, Any] = {}
    if path is not None:
        values.update(coerce_values(parse_config_text(Path(path).read_text(encoding="utf-8"))))
    cfg = TrainConfig(**values)
    return cfg.with_overrides(overrides or {})
