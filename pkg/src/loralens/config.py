"""JSON run configuration. Unknown keys are rejected at every nesting level."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import LoraConfig, ModelConfig
from .train import OptimConfig


@dataclass(frozen=True)
class DataConfig:
    seed: int
    n_per_class: int
    noise_sigma: float = 0.5
    distractor_scale: float = 1.0


@dataclass(frozen=True)
class StageConfig:
    steps: int
    seed: int
    log_every: int = 1


@dataclass(frozen=True)
class AnalysisConfig:
    sample_per_class: int = 25
    sample_seed: int = 4
    ranks: tuple = (2, 8, 16)
    rank_steps: int = 800


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    source: DataConfig = field(default_factory=lambda: DataConfig(seed=1, n_per_class=100))
    target: DataConfig = field(default_factory=lambda: DataConfig(seed=2, n_per_class=200))
    train_fraction: float = 0.6
    split_seed: int = 3
    init_seed: int = 11
    pretrain: StageConfig = field(default_factory=lambda: StageConfig(steps=600, seed=7))
    adapt: StageConfig = field(default_factory=lambda: StageConfig(steps=800, seed=5, log_every=10))
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self):
        return _plain(asdict(self))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes):
        d = self.to_dict()
        for dotted, value in changes.items():
            node = d
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_NESTED = {
    "model": ModelConfig, "lora": LoraConfig, "optim": OptimConfig, "source": DataConfig,
    "target": DataConfig, "pretrain": StageConfig, "adapt": StageConfig, "analysis": AnalysisConfig,
}


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get(k) if cls is RunConfig else None
        if sub is not None:
            kwargs[k] = _build(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if cls is RunConfig:
        obj.lora.check(obj.model)
        if not 0.0 < obj.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if obj.model.num_classes != 4:
            raise ConfigError("model.num_classes must be 4 for the synthetic target task")
        for name in ("pretrain", "adapt"):
            if getattr(obj, name).steps < 1:
                raise ConfigError(f"{name}.steps must be >= 1")
    return obj
