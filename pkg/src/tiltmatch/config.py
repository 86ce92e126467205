"""Run configuration: nested dataclasses loaded from a versioned JSON document.

Unknown keys are rejected so typos fail loudly; the resolved document is
written next to every run's outputs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    kind: str = "linear"
    exponent: float = 1.0


@dataclass
class MazeSection:
    width: int = 15
    door_fraction: float = 0.4
    seed: int = 0
    body_length: int = 24
    n_prompts: int = 32


@dataclass
class ModelSection:
    embed_dim: int = 32
    hidden_dim: int = 128
    window: int = 3
    init_scale: float = 1.0


@dataclass
class PretrainSection:
    n_paths: int = 8192
    epochs: int = 12
    batch_size: int = 64
    lr: float = 3e-3
    eval_rollouts_per_prompt: int = 16


@dataclass
class DtmSection:
    c: float = 1.0
    h: float = 2.5
    A: float = 15.0
    batch_size: int = 64
    s_cap: float = 1e-3
    reward_clip: float | None = None
    objective: str = "sar"


@dataclass
class BufferSection:
    size: int = 256
    refresh_interval: int = 32
    refresh_fraction: float = 0.25


@dataclass
class RolloutSection:
    steps: int = 24
    block: int = 4
    order: str = "random"
    temperature: float = 1.0


@dataclass
class OptimizerSection:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.1
    clip: float = 2.0


@dataclass
class FinetuneSection:
    # total optimizer steps across all phases; steps per phase = total / phases
    total_steps: int = 600
    eval_rollouts_per_prompt: int = 16


@dataclass
class EvalSection:
    rollouts_per_prompt: int = 16
    temperature: float = 1.0
    svg: bool = False


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    threads: int = 1
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    maze: MazeSection = field(default_factory=MazeSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    dtm: DtmSection = field(default_factory=DtmSection)
    buffer: BufferSection = field(default_factory=BufferSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(d["optimizer"]["betas"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(data)


def validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.schedule.kind in ("linear", "poly"), "schedule.kind must be linear or poly"),
        (cfg.maze.width >= 5 and cfg.maze.width % 2 == 1, "maze.width must be odd and >= 5"),
        (0.0 <= cfg.maze.door_fraction <= 1.0, "maze.door_fraction must lie in [0, 1]"),
        (cfg.dtm.h > 0, "dtm.h must be positive"),
        (cfg.dtm.A >= 0, "dtm.A must be nonnegative"),
        (cfg.dtm.objective in ("any", "sar"), "dtm.objective must be any or sar"),
        (cfg.rollout.order in ("random", "confidence"), "rollout.order must be random or confidence"),
        (cfg.rollout.temperature >= 0, "rollout.temperature must be nonnegative"),
        (cfg.threads >= 1, "threads must be >= 1"),
        (0 < cfg.buffer.refresh_fraction <= 1, "buffer.refresh_fraction must lie in (0, 1]"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
