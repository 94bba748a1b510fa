"""Versioned JSON pipeline configuration.

Every section is a dataclass; unknown keys at any level are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .align import AlignConfig
from .fusion import FusionConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    d_in: int = 32
    n_concepts: int = 4
    n_classes: int = 4
    n_per_class: int = 200
    noise: float = 0.3
    probe_noise: float = 0.3
    random_noise: float = 0.3
    relevance: Optional[List[List[int]]] = None


@dataclass
class ModelConfig:
    width: int = 64
    depth: int = 5
    instrumented: List[str] = field(default_factory=lambda: ["L1", "L2", "L3", "L4"])
    residual: bool = True
    branch_gain: float = 3.0
    common_mode: float = 1.5
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64
    min_accuracy: float = 0.95


@dataclass
class CavConfig:
    runs: int = 10
    probe_size: int = 50
    l2: float = 0.01
    epochs: int = 200
    lr: float = 0.01


@dataclass
class Stage1Config:
    d_embed: int = 64
    hidden: int = 64
    epochs: int = 500
    lr: float = 1e-3
    threshold: float = 0.05
    shared_init: bool = True


@dataclass
class ScheduleConfig:
    tau0: float = 1.0
    tau_max: float = 50.0


@dataclass
class AttackConfig:
    source_concept: str = "concept2"
    target_concept: str = "concept0"
    layer: str = "L3"
    epsilon: float = 0.5
    gamma: float = 0.01
    steps: int = 200
    lr: float = 0.01


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    model_name: str = "synthetic"
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    cav: CavConfig = field(default_factory=CavConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    align: AlignConfig = field(default_factory=AlignConfig)
    fuse: FusionConfig = field(default_factory=FusionConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    attack: Optional[AttackConfig] = None

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=seed)


_SECTIONS = {
    "world": WorldConfig, "model": ModelConfig, "cav": CavConfig, "stage1": Stage1Config,
    "align": AlignConfig, "fuse": FusionConfig, "schedule": ScheduleConfig, "attack": AttackConfig,
}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def from_dict(data: Dict[str, Any]) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    kwargs = dict(data)
    for name, cls in _SECTIONS.items():
        if name in kwargs and kwargs[name] is not None:
            kwargs[name] = _build(cls, kwargs[name], name)
    try:
        return PipelineConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Optional[Path]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(data)


def validate(cfg: PipelineConfig) -> None:
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    w, m = cfg.world, cfg.model
    if w.n_concepts < 2 or w.n_classes < 2:
        raise ConfigError("need >= 2 concepts and >= 2 classes")
    if w.n_concepts > w.d_in:
        raise ConfigError("n_concepts cannot exceed d_in")
    layers = [f"L{i + 1}" for i in range(m.depth)]
    bad = [l for l in m.instrumented if l not in layers]
    if bad:
        raise ConfigError(f"instrumented layers {bad} not in {layers}")
    if len(m.instrumented) < 2:
        raise ConfigError("need >= 2 instrumented layers")
    if len(set(m.instrumented)) != len(m.instrumented):
        raise ConfigError("duplicate instrumented layers")
    if cfg.cav.runs < 2:
        raise ConfigError("need >= 2 random runs")
    if cfg.cav.probe_size < 2:
        raise ConfigError("probe_size must be >= 2")
    if cfg.fuse.batch_size > w.n_per_class:
        raise ConfigError("fusion batch exceeds the examples per class")
    if not 0 < cfg.schedule.tau0 <= cfg.schedule.tau_max:
        raise ConfigError("need 0 < tau0 <= tau_max")
    a = cfg.attack
    if a is not None:
        concepts = [f"concept{c}" for c in range(w.n_concepts)]
        if a.source_concept == a.target_concept:
            raise ConfigError("attack source and target concepts must differ")
        for c in (a.source_concept, a.target_concept):
            if c not in concepts:
                raise ConfigError(f"attack concept {c!r} not in {concepts}")
        if a.layer != "auto" and a.layer not in m.instrumented:
            raise ConfigError(f"attack layer {a.layer!r} is not instrumented")
        if a.epsilon < 0 or a.gamma < 0 or a.steps < 0:
            raise ConfigError("attack epsilon, gamma and steps must be >= 0")
