"""Model/training configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ContractError


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 8
    metapath_attention_dim: int = 128
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    num_epochs: int = 150
    inner_order_mode: str = "count"
    outer_order_mode: str = "degree"
    instance_encoder: str = "mean"
    zoh_exact: bool = True
    max_instances_per_node: int = 200
    simple_paths_only: bool = False
    state_dim: int = 16
    expand: int = 2
    conv_width: int = 4
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden_dim", "num_layers", "num_heads", "metapath_attention_dim",
                     "state_dim", "expand", "conv_width", "max_instances_per_node"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_epochs < 0:
            raise ContractError("num_epochs must be >= 0")
        if self.hidden_dim % self.num_heads:
            raise ContractError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.inner_order_mode not in ("count", "random"):
            raise ContractError(f"inner_order_mode must be count|random, got {self.inner_order_mode!r}")
        if self.outer_order_mode not in ("degree", "random"):
            raise ContractError(f"outer_order_mode must be degree|random, got {self.outer_order_mode!r}")
        if self.instance_encoder not in ("mean", "linear"):
            raise ContractError(f"instance_encoder must be mean|linear, got {self.instance_encoder!r}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ContractError("need 0 < dt_min <= dt_max")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ContractError("learning_rate and weight_decay must be non-negative")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


PRESETS = {
    # small heterogeneous benchmarks (DBLP / IMDB / ACM sized)
    "hgb": ModelConfig(),
    # large graphs (ogbn-mag sized)
    "large": ModelConfig(hidden_dim=128, num_layers=4, learning_rate=3e-3, weight_decay=5e-4,
                         num_epochs=300, metapath_attention_dim=256),
}


def _coerce(raw: str, kind, key: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ContractError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ContractError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip("\"'")


def parse_config_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. ``preset = large`` selects a base."""
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    values: dict = {}
    preset = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            preset = raw
            continue
        if key not in kinds:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(raw, kinds[key], key)
    if preset is not None and preset not in PRESETS:
        raise ContractError(f"unknown preset {preset!r}")
    start = PRESETS[preset] if preset else (base or ModelConfig())
    return ModelConfig.from_dict({**start.to_dict(), **values})


def load_config(path: str | Path) -> ModelConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: ModelConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
