"""Run configuration: typed sections plus a flat ``section.key = value`` text format.

A field named ``lambda_`` is addressed as ``lambda`` in files and overrides.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError


@dataclass
class BackboneConfig:
    input_size: int = 512
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    stage_strides: tuple[int, ...] = (4, 8, 16, 32)
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    num_experts: int = 3
    clone_init_experts: bool = False

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or len(self.blocks) != 4:
            raise ConfigError("stage_channels and blocks need exactly 4 entries")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage_channels must double per stage, got {self.stage_channels}")
        if tuple(self.stage_strides) != (4, 8, 16, 32):
            raise ConfigError("stage_strides are fixed by the residual encoder: (4, 8, 16, 32)")
        if self.num_experts < 2:
            raise ConfigError("num_experts must be >= 2")
        if self.input_size % 32 != 0 or self.input_size <= 0:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")
        if min(self.blocks) < 1:
            raise ConfigError("every stage needs at least one residual block")


@dataclass
class SSFMConfig:
    ace_double_norm: bool = True
    reduction: int = 16
    spatial_kernel: int = 7
    scale_kernels: tuple[int, ...] = (1, 3, 5, 7)
    shuffle_groups: int = 0  # 0 -> len(scale_kernels)

    @property
    def groups(self) -> int:
        return self.shuffle_groups or len(self.scale_kernels)

    def validate(self, channels: int) -> None:
        if self.reduction < 1 or channels % self.reduction != 0:
            raise ConfigError(f"channels ({channels}) not divisible by reduction ratio {self.reduction}")
        if self.spatial_kernel % 2 != 1:
            raise ConfigError("spatial_kernel must be odd")
        if not self.scale_kernels or any(k % 2 != 1 for k in self.scale_kernels):
            raise ConfigError("scale_kernels must be a non-empty list of odd sizes")
        if (channels * len(self.scale_kernels)) % self.groups != 0:
            raise ConfigError("concatenated channels not divisible by shuffle_groups")


@dataclass
class MCRMConfig:
    embed_dim: int = 128
    temperature: float = 0.07
    lambda_: float = 0.5
    queue_size: int = 4096
    gate_tau: float = 1.0
    gate_tau_end: Optional[float] = None
    gate_hard: bool = False
    aux_expert_ce: float = 0.0
    ema_keys: bool = False
    ema_momentum: float = 0.999

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("contrastive temperature must be > 0")
        if self.gate_tau <= 0 or (self.gate_tau_end is not None and self.gate_tau_end <= 0):
            raise ConfigError("gate temperature must be > 0")
        if self.lambda_ < 0:
            raise ConfigError("lambda must be >= 0")
        if self.queue_size < 0:
            raise ConfigError("queue_size must be >= 0")


@dataclass
class ModelConfig:
    num_classes: int = 7
    ace_on: bool = True
    samc_on: bool = True


@dataclass
class DataConfig:
    root: str = ""
    manifest: str = "manifest.csv"
    classes: str = "classes.txt"
    split: tuple[float, ...] = (0.7, 0.15, 0.15)
    train_on: str = "train"
    eval_on: str = "val"
    augment: bool = True
    rotation: float = 15.0
    hflip: float = 0.5
    vflip: float = 0.5
    brightness: tuple[float, ...] = (0.8, 1.2)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0  # 0 disables
    seed: int = 0
    lmc_on: bool = True
    alpha_mode: str = "adaptive"
    deterministic: bool = True

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for contrastive losses")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        fixed_alpha(self.alpha_mode)


def fixed_alpha(mode: str) -> Optional[float]:
    """Parse ``alpha_mode``: ``adaptive`` -> None, ``fixed:<v>`` -> v."""
    if mode == "adaptive":
        return None
    if mode.startswith("fixed:"):
        try:
            value = float(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad alpha_mode {mode!r}") from None
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"fixed alpha must lie in [0, 1], got {value}")
        return value
    raise ConfigError(f"alpha_mode must be 'adaptive' or 'fixed:<value>', got {mode!r}")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ssfm: SSFMConfig = field(default_factory=SSFMConfig)
    mcrm: MCRMConfig = field(default_factory=MCRMConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.ssfm.validate(self.backbone.stage_channels[3])
        self.mcrm.validate()
        self.train.validate()
        if self.model.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        return self

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for section in dataclasses.fields(self):
            sub = getattr(self, section.name)
            for f in dataclasses.fields(sub):
                flat[f"{section.name}.{_key(f.name)}"] = getattr(sub, f.name)
        return flat

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        for section, values in d.items():
            sub = getattr(cfg, section)
            hints = typing.get_type_hints(type(sub))
            for name, value in values.items():
                setattr(sub, name, _coerce(value, hints[name], f"{section}.{name}"))
        return cfg

    def model_hash(self) -> str:
        """Hash of every setting that changes the parameter layout."""
        parts = {k: dataclasses.asdict(getattr(self, k)) for k in ("backbone", "ssfm", "mcrm", "model")}
        for k in ("gate_tau", "gate_tau_end", "temperature", "lambda_", "aux_expert_ce", "ema_momentum"):
            parts["mcrm"].pop(k)
        blob = json.dumps(parts, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def set(self, key: str, raw: Any) -> None:
        section, _, name = key.partition(".")
        if not name or not hasattr(self, section):
            raise ConfigError(f"unknown config key {key!r}")
        sub = getattr(self, section)
        attr = _attr(name)
        hints = typing.get_type_hints(type(sub))
        if attr not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(sub, attr, _coerce(raw, hints[attr], key))


def _key(attr: str) -> str:
    return attr[:-1] if attr.endswith("_") else attr


def _attr(key: str) -> str:
    return "lambda_" if key == "lambda" else key


def _coerce(raw: Any, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)][0]
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("none", "")):
            return None
        return _coerce(raw, inner, key)
    try:
        if origin is tuple:
            if isinstance(raw, str):
                items = [s for s in raw.replace("(", "").replace(")", "").split(",") if s.strip()]
            else:
                items = list(raw)
            return tuple(_coerce(x, args[0], key) for x in items)
        if tp is bool:
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(str(raw).strip()) if isinstance(raw, str) else int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {raw!r} for {key}") from None
    raise ConfigError(f"unsupported type for {key}")


def parse_overrides(items: list[str]) -> list[tuple[str, str]]:
    out = []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        out.append((key.strip(), value.strip()))
    return out


def load_config(path: Optional[str | Path] = None, overrides: list[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            cfg.set(key.strip(), value.strip())
    for key, value in parse_overrides(list(overrides)):
        cfg.set(key, value)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        elif value is None:
            value = "none"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
