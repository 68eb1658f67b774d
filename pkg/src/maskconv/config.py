"""Run configuration: every knob a command needs, serialisable to JSON."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .diffusion import BartRates
from .guidance import LossWeights
from .model import ModelConfig
from .sampler import SamplerConfig


@dataclass(frozen=True)
class TrainConfig:
    epsilon: float = 1e-3
    lr: float = 3e-4
    dp_lr: float = 1e-3  # duration head
    adam_betas: tuple[float, float] = (0.9, 0.98)
    batch_size: int = 32
    grad_clip: float = 1.0
    pretrain_epochs: int = 4
    finetune_epochs: int = 20
    content_dropout: float = 0.1
    pos_weight: float = 2.0
    # chance that a fine-tuning target is laid out on the source timeline
    aligned_target_prob: float = 0.5


@dataclass(frozen=True)
class CorpusConfig:
    n: int = 5000
    heldout_percent: int = 10
    spec_path: str | None = None  # corpus spec JSON; None uses the built-in default
    path: str | None = None  # JSON-lines corpus file


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 200  # held-out samples used by eval and sweep
    ratio: str = "auto"  # length choice for eval conversions
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bart: BartRates = field(default_factory=BartRates)
    weights: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        return _build(cls, data)

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current) and isinstance(value, dict):
            kwargs[name] = _build(type(current), value)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)
