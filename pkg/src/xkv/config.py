"""Stream/run configuration and config-file loading.

A config file (TOML or JSON) holds a flat table whose keys exactly match
StreamConfig field names; unknown keys are rejected. Command-line
overrides are applied on top of file values.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import BudgetInfeasibleError, ParameterError

try:
    import tomllib  # Python >= 3.11
except ImportError:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class StreamConfig:
    """All hyperparameters of a synthetic streaming run.

    Defaults follow the reference operating point: pooling size 16,
    token budget 2048, INT4 codes with group size 64.
    """

    heads: int = 2
    d_head: int = 64
    d_model: int = 128
    registers: int = 4          # register tokens per frame
    patches: int = 64           # patch tokens per frame
    pool_size: int = 16         # patch-query pooling group size
    budget: int = 2048          # max retained cache tokens per layer
    bits: int = 4               # quantization bit width
    group_size: int = 64        # quantization group size
    frames: int = 100
    redundancy: float = 0.95    # inter-frame correlation, in [0, 1)
    outlier_channels: int = 4   # key channels amplified to mimic hot channels
    outlier_amp: float = 20.0
    seed: int = 0
    layers: int = 1

    def __post_init__(self):
        counts = {
            "heads": self.heads, "d_head": self.d_head, "d_model": self.d_model,
            "pool_size": self.pool_size, "bits": self.bits,
            "group_size": self.group_size, "frames": self.frames,
            "layers": self.layers, "patches": self.patches,
        }
        for name, value in counts.items():
            if value < 1:
                raise ParameterError(f"{name} must be >= 1, got {value}")
        if self.registers < 0:
            raise ParameterError(f"registers must be >= 0, got {self.registers}")
        if not 2 <= self.bits <= 8:
            raise ParameterError(f"bits must be in [2, 8], got {self.bits}")
        if not 0.0 <= self.redundancy < 1.0:
            raise ParameterError(f"redundancy must be in [0, 1), got {self.redundancy}")
        if self.outlier_amp < 1.0:
            raise ParameterError(f"outlier_amp must be >= 1, got {self.outlier_amp}")
        if not 0 <= self.outlier_channels <= self.heads * self.d_head:
            raise ParameterError(
                f"outlier_channels must be in [0, {self.heads * self.d_head}], "
                f"got {self.outlier_channels}"
            )
        # The first and current frames are always retained, so a budget that
        # cannot hold two whole frames is unrepresentable. Fail fast.
        if self.budget < 2 * self.tokens_per_frame:
            raise BudgetInfeasibleError(
                f"budget {self.budget} < 2 * tokens_per_frame "
                f"{2 * self.tokens_per_frame}; first + current frames cannot fit"
            )

    @property
    def tokens_per_frame(self) -> int:
        return 1 + self.registers + self.patches

    @property
    def n_special(self) -> int:
        return 1 + self.registers

    def replace(self, **changes) -> "StreamConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f.type for f in dataclasses.fields(StreamConfig)}
_FLOAT_FIELDS = {"redundancy", "outlier_amp"}


def _coerce(key: str, value) -> object:
    if key in _FLOAT_FIELDS:
        return float(value)
    if isinstance(value, bool):
        raise ParameterError(f"config key {key!r} must be a number, got {value!r}")
    if isinstance(value, float) and not value.is_integer():
        raise ParameterError(f"config key {key!r} must be an integer, got {value!r}")
    return int(value)


def config_from_mapping(mapping: dict) -> StreamConfig:
    """Build a StreamConfig from a flat dict, rejecting unknown keys."""
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ParameterError(f"unknown config key(s): {', '.join(unknown)}")
    return StreamConfig(**{k: _coerce(k, v) for k, v in mapping.items()})


def load_config(path) -> StreamConfig:
    """Load a StreamConfig from a TOML (.toml) or JSON file."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(path) as fh:
            data = json.load(fh)
    if not isinstance(data, dict):
        raise ParameterError(f"config file {path} must hold a flat table/object")
    return config_from_mapping(data)


def apply_overrides(config: StreamConfig, pairs: dict) -> StreamConfig:
    """Apply key=value overrides (string values) on top of a config."""
    changes = {}
    for key, raw in pairs.items():
        if key not in _FIELDS:
            raise ParameterError(f"unknown config key(s): {key}")
        try:
            changes[key] = float(raw) if key in _FLOAT_FIELDS else int(raw)
        except (TypeError, ValueError):
            raise ParameterError(f"cannot parse override {key}={raw!r}") from None
    return config.replace(**changes)
