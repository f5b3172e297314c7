"""Run configuration: one YAML file with a strict schema (unknown keys are errors)."""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .audio_io import QcThresholds
from .augmentation import AugmentPolicy
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    manifest: str = "manifest.csv"
    workdir: str = "work"


@dataclass
class PreprocessConfig:
    qc_clip: float = 0.01
    qc_snr_db: float = 5.0
    split_ratios: tuple = (0.70, 0.15, 0.15)
    patient_level: bool = None  # None: use patient ids when the manifest has any

    def thresholds(self):
        return QcThresholds(self.qc_clip, self.qc_snr_db)


@dataclass
class XaiConfig:
    ig_steps: int = 64
    n_baselines: int = 8
    baseline_noise_std: float = 0.1
    shap_permutations: int = 100
    shap_background: int = 50
    global_samples: int = 10


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocessing: PreprocessConfig = field(default_factory=PreprocessConfig)
    augmentation: AugmentPolicy = field(default_factory=AugmentPolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    xai: XaiConfig = field(default_factory=XaiConfig)
    seed: int = 0
    replicates: int = 1

    def __post_init__(self):
        # the top-level seed drives every seeded component
        self.augmentation.seed = self.seed
        self.training.seed = self.seed

    def to_dict(self):
        d = {
            "paths": asdict(self.paths),
            "preprocessing": asdict(self.preprocessing),
            "augmentation": self.augmentation.to_dict(),
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "xai": asdict(self.xai),
            "seed": self.seed,
            "replicates": self.replicates,
        }
        d["preprocessing"]["split_ratios"] = list(self.preprocessing.split_ratios)
        del d["augmentation"]["seed"], d["training"]["seed"]
        return d

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


_SECTIONS = {
    "paths": PathsConfig,
    "preprocessing": PreprocessConfig,
    "augmentation": AugmentPolicy,
    "model": ModelConfig,
    "training": TrainConfig,
    "xai": XaiConfig,
}
_SEEDED = {"augmentation", "training"}  # their seed comes from the top level


def _build(section, cls, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    allowed = {f.name for f in fields(cls)} - ({"seed"} if section in _SEEDED else set())
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) and k.endswith(("range", "range_db", "semitones", "ratios")) else v
              for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def from_dict(raw):
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed", "replicates"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    parts = {name: _build(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    replicates = raw.get("replicates", 1)
    if not isinstance(replicates, int) or replicates < 1:
        raise ConfigError(f"replicates must be a positive integer, got {replicates!r}")
    return RunConfig(**parts, seed=seed, replicates=replicates)


def load_config(path):
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw)
