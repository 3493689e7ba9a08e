"""Run configuration: nested frozen dataclasses with canonical JSON.

Every field carries a desk-scale default.  The canonical serialisation
(sorted keys, no whitespace) hashes to the run identifier.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

from .contrastive import TrainConfig
from .data import SplitSpec
from .evaluate import ClassifierConfig
from .style import StyleConfig

ARMS = ("ssl", "supervised")
MACRO_MODES = ("adapted", "original", "none")
BACKBONES = ("warmup", "random")


@dataclass(frozen=True)
class WarmupConfig:
    """Short supervised warm-up of the feature net used for style transfer."""

    iterations: int = 150
    lr: float = 0.02
    batch_size: int = 32


@dataclass(frozen=True)
class Paths:
    data_dir: str = ""
    run_dir: str = ""
    cache_dir: str = ""


@dataclass(frozen=True)
class Config:
    split: SplitSpec = field(default_factory=SplitSpec)
    style: StyleConfig = field(default_factory=StyleConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    paths: Paths = field(default_factory=Paths)
    seed: int = 0  # training seed; the data seed is split.seed
    arm: str = "ssl"
    macro: str = "adapted"
    # initial extractor weights for both arms: the warm-up net or a fresh init
    backbone: str = "warmup"

    def validate(self) -> "Config":
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.macro not in MACRO_MODES:
            raise ValueError(f"macro must be one of {MACRO_MODES}, got {self.macro!r}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        self.split.validate()
        self.style.validate()
        self.train.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def replace(self, **changes) -> "Config":
        """``dataclasses.replace`` that also accepts dotted keys, e.g. ``train.iterations``."""
        nested: Dict[str, Dict[str, Any]] = {}
        flat = {}
        for k, v in changes.items():
            if "." in k:
                outer, inner = k.split(".", 1)
                nested.setdefault(outer, {})[inner] = v
            else:
                flat[k] = v
        for outer, inner in nested.items():
            flat[outer] = dataclasses.replace(getattr(self, outer), **inner)
        return dataclasses.replace(self, **flat)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Config":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            sub = _SECTIONS.get(f.name)
            kwargs[f.name] = _build(sub, value) if sub else value
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


_SECTIONS = {
    "split": SplitSpec,
    "style": StyleConfig,
    "warmup": WarmupConfig,
    "train": TrainConfig,
    "classifier": ClassifierConfig,
    "paths": Paths,
}


def _build(kind, values: Dict[str, Any]):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown keys for {kind.__name__}: {sorted(unknown)}")
    fixed = {}
    for k, v in values.items():
        # JSON has no tuples
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        fixed[k] = v
    return kind(**fixed)


def load_config(path) -> Config:
    with open(path) as f:
        return Config.from_dict(json.load(f))


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
