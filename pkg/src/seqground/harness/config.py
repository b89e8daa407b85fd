"""Experiment configuration, loadable from YAML/JSON key-value files.

Schema (all keys optional)::

    variant: groundflow            # none | concat_all | lstm | gru | transformer
                                   # | groundflow[/short_only|long_only_merged|raw_short|raw_long]
    epochs: 50
    batch_size: 32
    lr: 1.0e-4
    weight_decay: 0.05
    beta1: 0.9
    beta2: 0.999
    eps: 1.0e-8
    clip_norm: 1.0
    seed: 0
    hidden: 32
    l_max: 4                       # concat_all defaults to concat_l_max
    concat_l_max: 32
    data_fraction: 1.0
    train_path: data/train.jsonl
    eval_path: data/eval.jsonl
    output_dir: runs/exp
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from ..fusion_baselines import FusionVariant
from ..grounder import Variant


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "groundflow"
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    hidden: int = 32
    l_max: int = 4
    concat_l_max: int = 32
    data_fraction: float = 1.0
    train_path: str | None = None
    eval_path: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            Variant.parse(self.variant)
        except ValueError as e:
            raise ConfigError(f"bad variant {self.variant!r}: {e}") from None
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.lr < 1:
            raise ConfigError(f"lr must lie in [0, 1), got {self.lr}")
        if self.weight_decay < 0 or self.eps <= 0 or self.clip_norm <= 0:
            raise ConfigError("weight_decay must be >= 0; eps and clip_norm > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")
        if self.hidden < 1 or self.l_max < 1:
            raise ConfigError("hidden and l_max must be positive")

    @property
    def parsed_variant(self) -> Variant:
        return Variant.parse(self.variant)

    @property
    def effective_l_max(self) -> int:
        return self.concat_l_max if self.parsed_variant.fusion is FusionVariant.CONCAT_ALL else self.l_max

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Stable digest of everything that influences results (not paths)."""
        d = {k: v for k, v in asdict(self).items() if k not in ("train_path", "eval_path", "output_dir")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_mapping(path))


def load_mapping(path) -> dict:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML/JSON: {e}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return doc
