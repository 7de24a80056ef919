"""Run configuration: one JSON file holding every module's settings plus paths."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .io_utils import atomic_write_text
from .model import TrainConfig
from .timeseries import InjectConfig, SplitSpec, SynthConfig

PRESETS = ("paper-synthetic", "toy")


@dataclass(frozen=True)
class SignatureConfig:
    scales: tuple[int, ...] = (10, 30, 60)
    gap: int = 10
    standardize: bool = True

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scales" in d:
            d["scales"] = tuple(d["scales"])
        return cls(**d)

    def to_dict(self):
        return {"scales": list(self.scales), "gap": self.gap, "standardize": self.standardize}


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (32, 64, 128, 256)
    kernels: tuple[int, ...] = (3, 3, 2, 2)
    strides: tuple[int, ...] = (1, 2, 2, 2)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) for k, v in d.items()})

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class DetectConfig:
    quantile: float = 0.995
    beta: float = 1.0
    gap_merge: int = 1
    detection_channel: int = 0
    top_k: int = 3
    batch_size: int = 32

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PathsConfig:
    """File names, relative to the work directory unless absolute."""

    data: str = "data.csv"
    labels: str = "labels.json"
    cache_dir: str = "cache"
    checkpoint: str = "model.ckpt"
    train_log: str = "train_log.csv"
    reports_dir: str = "reports"

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    inject: InjectConfig = field(default_factory=InjectConfig)
    splits: SplitSpec = field(default_factory=SplitSpec.standard)
    signature: SignatureConfig = field(default_factory=SignatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    source: str = "synthetic"  # or "csv": read paths.data instead of generating
    csv_header: bool = True
    seed: int = 0

    _SECTIONS = {
        "synth": SynthConfig,
        "inject": InjectConfig,
        "splits": SplitSpec,
        "signature": SignatureConfig,
        "model": ModelConfig,
        "train": TrainConfig,
        "detect": DetectConfig,
        "paths": PathsConfig,
    }

    def to_dict(self) -> dict:
        d = {name: getattr(self, name).to_dict() for name in self._SECTIONS}
        d.update(source=self.source, csv_header=self.csv_header, seed=self.seed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls._SECTIONS) - {"source", "csv_header", "seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, typ in cls._SECTIONS.items():
            if name in d:
                try:
                    kw[name] = typ.from_dict(d[name])
                except TypeError as exc:
                    raise ConfigError(f"section {name!r}: {exc}") from None
        for key in ("source", "csv_header", "seed"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)

    def with_seed(self, seed: int) -> "RunConfig":
        """Derive every sub-seed from one global seed."""
        return replace(
            self,
            seed=seed,
            synth=replace(self.synth, seed=seed),
            inject=replace(self.inject, seed=seed + 1),
            train=replace(self.train, seed=seed + 2),
        )

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("mscred.presets").joinpath(f"{name}.json").read_text()
    return RunConfig.from_dict(json.loads(text))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values parse as JSON, falling back to text."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = d
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ConfigError(f"unknown config section in {key!r}")
            target = target[part]
        target[parts[-1]] = value
    return RunConfig.from_dict(d)
