"""Experiment configuration read from INI files (sections of key = value)."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .decoder import DecoderConfig
from .losses import LossWeights
from .sampler import CameraSpec, HeatmapGrid


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    lr_stage2: float = 1e-4
    decay_epoch: int = 16  # 40 of 50 in the full schedule, scaled to 20
    decay_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    epochs_stage1: int = 20
    epochs_stage2: int = 5
    disc_lr: float = 1e-3
    disc_steps: int = 1  # discriminator updates per detector update
    grad_clip: float = 0.0  # 0 disables global-norm clipping

    def __post_init__(self):
        if self.epochs_stage1 <= 0 or self.epochs_stage2 < 0:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2000
    n_test: int = 500
    image_size: int = 64
    thickness: float = 1.5
    ambiguity_fraction: float = 0.5
    pose_spec: str = ""  # empty: packaged default
    global_yaw_deg: float = 0.0  # > 0 overrides the yaw width of the global rotation


@dataclass(frozen=True)
class ModelConfig:
    pool: int = 8
    hidden: int = 256
    mask_res: int = 32
    physique_hidden: int = 128
    disc_hidden: int = 64
    disc_blocks: int = 2
    disc_out: int = 16
    disc_header: int = 128
    use_gan: bool = True


@dataclass(frozen=True)
class SeedConfig:
    data: int = 0
    test: int = 1
    model: int = 0
    shuffle: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    grid: HeatmapGrid = field(default_factory=HeatmapGrid)
    losses: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    camera: CameraSpec = field(default_factory=CameraSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def to_dict(self) -> dict:
        return {f.name: asdict(getattr(self, f.name)) for f in fields(self)}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields of some sections changed: ``replace(optim={"lr": 0.1})``."""
        current = {f.name: getattr(self, f.name) for f in fields(self)}
        for name, changes in sections.items():
            section = current[name]
            current[name] = type(section)(**{**asdict(section), **changes})
        return ExperimentConfig(**current)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        kwargs = {}
        for f in fields(cls):
            section_type = type(f.default_factory())
            values = dict(obj.get(f.name, {}))
            for sf in fields(section_type):
                if sf.name in values and isinstance(values[sf.name], list):
                    values[sf.name] = tuple(values[sf.name])
            kwargs[f.name] = section_type(**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        parser = configparser.ConfigParser()
        parser.read(path)
        base = cls()
        obj = base.to_dict()
        for section in parser.sections():
            if section not in obj:
                raise ValueError(f"unknown config section [{section}]")
            defaults = obj[section]
            for key, raw in parser.items(section):
                if key not in defaults:
                    raise ValueError(f"unknown key {key!r} in [{section}]")
                defaults[key] = _coerce(raw, defaults[key])
        cfg = cls.from_dict(obj)
        if cfg.data.pose_spec:
            spec_path = (path.parent / cfg.data.pose_spec)
            if not spec_path.exists():
                raise FileNotFoundError(f"pose spec {spec_path} not found")
            cfg = cfg.replace(data={"pose_spec": str(spec_path.resolve())})
        return cfg


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, (tuple, list)):
        return tuple(float(v) for v in raw.replace(",", " ").split())
    return raw.strip()


def benchmark_config_path() -> Path:
    """The packaged config for the synthetic ambiguity benchmark."""
    return Path(__file__).parent / "data" / "benchmark.ini"
