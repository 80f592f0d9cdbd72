"""Run configuration: one YAML (or JSON) document with a section per component.

Every section defaults to the library defaults, so an empty file is a valid
config.  Unknown keys are rejected with their full dotted path.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .dataset import DataConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .lora import LoRAConfig
from .pretrain import PretrainConfig
from .signals import Task


@dataclass
class HeadSection:
    gru_hidden: int = 128

    def __post_init__(self):
        if self.gru_hidden < 1:
            raise ConfigError("head.gru_hidden must be >= 1")


@dataclass
class FineTuneSection:
    """Fine-tuning optimizer settings; adapters live in the ``lora`` section."""

    lr: float = 1e-3
    head_lr: float | None = None
    batch_size: int = 256
    epochs: int = 10
    weight_decay: float = 0.01
    early_stop_patience: int = 3
    max_steps: int | None = None
    target_pfa: float = 0.05
    scale_head_input: bool = True


@dataclass
class PathsSection:
    """Optional input overrides; empty entries use the run directory layout."""

    pretrain_data: str | None = None
    train_data: str | None = None
    val_data: str | None = None
    test_data: str | None = None
    checkpoint: str | None = None
    artifact: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    task: Task = Task.SS
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FineTuneSection = field(default_factory=FineTuneSection)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    head: HeadSection = field(default_factory=HeadSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.task = Task(self.task.upper() if isinstance(self.task, str) else self.task)
        if self.data.N != self.encoder.N:
            raise ConfigError(f"data.N ({self.data.N}) must equal encoder.N ({self.encoder.N})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return json.loads(json.dumps(d))               # tuples become lists

    def fingerprint(self) -> str:
        """Content hash of the experiment; where files live is not part of it."""
        d = self.to_dict()
        del d["out_dir"], d["paths"]
        canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _build(cls, raw, path: str):
    """Instantiate dataclass ``cls`` from mapping ``raw``, recursing into sections."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        where = ", ".join(f"{path}.{k}" if path else k for k in unknown)
        raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: invalid value ({exc})") from None


def config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "")


def load_config(path) -> RunConfig:
    """Parse a YAML or JSON config file (JSON is read as YAML)."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML/JSON ({exc})") from None
    return config_from_dict(raw or {})
