"""Decoder and run configuration, plus the plain ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError

PE_TYPES = ("none", "absolute", "relative")
NUM_POSE_TOKENS = 24


@dataclass(frozen=True)
class DecoderConfig:
    """Hyperparameters of the deformable decoder.

    ``multi_query=False`` gives the single-query ablation (one token feeding
    a widened head); ``deformable=False`` pins sampling positions to the
    reference grid, i.e. regular cross-attention.
    """

    model_dim: int = 32
    num_heads: int = 8
    num_groups: int = 4
    offset_range: float = 1.0
    num_layers: int = 6
    context_channels: int = 32
    context_height: int = 6
    context_width: int = 6
    pe_type: str = "relative"
    ffn_multiplier: int = 4
    deformable: bool = True
    multi_query: bool = True

    def __post_init__(self):
        for name in ("model_dim", "num_heads", "num_groups", "context_channels", "context_height", "context_width"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigurationError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.num_heads % self.num_groups:
            raise ConfigurationError(f"num_heads={self.num_heads} not divisible by num_groups={self.num_groups}")
        if self.context_channels % self.num_groups:
            raise ConfigurationError(
                f"context_channels={self.context_channels} not divisible by num_groups={self.num_groups}"
            )
        if self.model_dim % self.num_heads:
            raise ConfigurationError(f"model_dim={self.model_dim} not divisible by num_heads={self.num_heads}")
        if not self.offset_range > 0:
            raise ConfigurationError(f"offset_range must be positive, got {self.offset_range}")
        if self.pe_type not in PE_TYPES:
            raise ConfigurationError(f"pe_type must be one of {PE_TYPES}, got {self.pe_type!r}")
        if self.ffn_multiplier < 1:
            raise ConfigurationError(f"ffn_multiplier must be positive, got {self.ffn_multiplier}")

    @property
    def num_queries(self):
        return NUM_POSE_TOKENS + 1 if self.multi_query else 1

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads

    @property
    def heads_per_group(self):
        return self.num_heads // self.num_groups

    @property
    def context_shape(self):
        return (self.context_channels, self.context_height, self.context_width)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs: decoder, synthetic data and optimizer settings."""

    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-3
    num_samples: int = 8
    num_vertices: int = 128
    template_seed: int = 0
    encoder_seed: int = 0
    noise: float = 0.01
    pose_scale: float = 0.2
    shape_scale: float = 0.3
    lambda_smpl: float = 1.0
    lambda_joint: float = 5.0
    lambda_mesh: float = 60.0

    def replace(self, **changes):
        dec = {k: changes.pop(k) for k in list(changes) if k in _DECODER_FIELDS}
        cfg = dataclasses.replace(self, **changes)
        if dec:
            cfg = dataclasses.replace(cfg, decoder=cfg.decoder.replace(**dec))
        return cfg

    def to_dict(self):
        out = {k: v for k, v in dataclasses.asdict(self.decoder).items()}
        out.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "decoder"})
        return out

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        unknown = set(values) - _DECODER_FIELDS.keys() - _RUN_FIELDS.keys()
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        dec = {k: _coerce(k, _DECODER_FIELDS[k], values.pop(k)) for k in list(values) if k in _DECODER_FIELDS}
        run = {k: _coerce(k, _RUN_FIELDS[k], v) for k, v in values.items()}
        return cls(decoder=DecoderConfig(**dec), **run)


_DECODER_FIELDS = {f.name: f.type for f in fields(DecoderConfig)}
_RUN_FIELDS = {f.name: f.type for f in fields(RunConfig) if f.name != "decoder"}


def _coerce(key, type_name, value):
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if type_name == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {text!r} as {type_name}") from None
    return text


def parse_config_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        values[key] = value
    return RunConfig.from_dict(values)


def load_config(path):
    return parse_config_text(Path(path).read_text())


def format_config(config):
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())
