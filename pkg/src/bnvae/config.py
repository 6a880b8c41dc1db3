"""Run configuration: nested dataclasses with strict JSON (de)serialization."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .latent import RegularizerConfig

TASKS = ("vae", "cvae", "lm")
SCHEDULES = ("constant", "linear", "cyclic")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | corpus
    components: int = 4
    vocab_size: int = 32
    min_len: int = 5
    max_len: int = 15
    train_size: int = 10_000
    valid_size: int = 1_000
    concentration: float = 0.1
    seed: int = 0
    response_rule: str = "distinct"
    train_path: str | None = None
    valid_path: str | None = None
    train_target_path: str | None = None
    valid_target_path: str | None = None
    train_label_path: str | None = None
    valid_label_path: str | None = None
    max_vocab: int = 10_000


@dataclass
class ModelSection:
    embed: int = 16
    hidden: int = 32
    latent: int = 8
    cell: str = "lstm"
    init_range: float = 0.1


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    beta: float = 1.0
    warm_epochs: float = 10.0
    period: float = 5.0
    ramp_fraction: float = 0.5


@dataclass
class OptimConfig:
    lr: float = 0.5
    clip: float = 5.0
    decay_factor: float = 0.5
    patience: int = 2
    max_decays: int = 5


@dataclass
class EvalConfig:
    eval_size: int = 500
    mi_samples: int = 1
    iw_samples: int = 500
    iw_size: int = 0
    probe_epochs: list[int] = field(default_factory=list)
    probe_size: int = 500
    grid_points: int = 321
    grid_limit: float = 4.0


@dataclass
class SeedConfig:
    init: int = 0
    data: int = 0
    noise: int = 0


@dataclass
class TrainConfig:
    task: str = "vae"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    anchor: bool = True
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 32
    max_epochs: int = 20
    bucket: bool = True
    seeds: SeedConfig = field(default_factory=SeedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    wall_clock: bool = True
    strict_floor: bool = False

    def validate(self) -> "TrainConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.schedule.kind not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.schedule.kind == "cyclic" and (self.schedule.period <= 0 or not 0 < self.schedule.ramp_fraction <= 1):
            raise ConfigError("cyclic schedule needs period > 0 and ramp_fraction in (0, 1]")
        if self.schedule.warm_epochs < 0:
            raise ConfigError("warm_epochs must be >= 0")
        if self.data.source not in ("synthetic", "corpus"):
            raise ConfigError("data.source must be synthetic or corpus")
        if self.data.source == "corpus" and not (self.data.train_path and self.data.valid_path):
            raise ConfigError("corpus data needs train_path and valid_path")
        if self.task == "cvae" and self.regularizer.kind not in ("none", "fixed_bn"):
            raise ConfigError("cvae supports regularizer none or fixed_bn")
        if self.regularizer.kind in ("fixed_bn", "extended_bn") and self.batch_size < 2:
            raise ConfigError("batch norm needs batch_size >= 2")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if self.optim.lr <= 0 or self.optim.clip <= 0:
            raise ConfigError("lr and clip must be positive")
        if self.model.cell not in ("lstm", "gru"):
            raise ConfigError("cell must be lstm or gru")
        if self.eval.probe_epochs and self.model.latent != 1:
            raise ConfigError("trajectory probes need model.latent == 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    (TrainConfig, "data"): DataConfig,
    (TrainConfig, "model"): ModelSection,
    (TrainConfig, "regularizer"): RegularizerConfig,
    (TrainConfig, "schedule"): ScheduleConfig,
    (TrainConfig, "optim"): OptimConfig,
    (TrainConfig, "seeds"): SeedConfig,
    (TrainConfig, "eval"): EvalConfig,
}


def config_from_dict(raw: dict) -> TrainConfig:
    return _build(TrainConfig, raw, "config").validate()


def load_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def apply_overrides(cfg: TrainConfig, overrides: dict[str, object]) -> TrainConfig:
    """Set dotted keys (``regularizer.gamma``) on a copy and re-validate."""
    raw = cfg.to_dict()
    for key, value in overrides.items():
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(raw)
