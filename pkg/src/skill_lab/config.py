"""Strict JSON experiment configuration.

Every section and key has a default; unknown keys are an error so that a
misspelled hyperparameter cannot be silently ignored.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .data import CorpusSpec
from .model import ModelConfig
from .losses import MODES
from .pipeline import PruningConfig, StageConfig
from .similarity import POOLING


class ConfigError(ValueError):
    pass


@dataclass
class TeacherConfig:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 2e-3
    mask_fraction: float = 0.15
    seed: int = 0


@dataclass
class CalibrationConfig:
    size: int = 200
    seed: int = 0
    pooling: str = "mean"
    frames_per_sample: int = 4


@dataclass
class ClusteringConfig:
    M: int = 4
    contiguous: bool = False


@dataclass
class DistillSection:
    mode: str = "skill"
    layers: list[int] | None = None  # fixed_layers: defaults to {0, L/3, 2L/3, L}
    gamma: str | None = None  # weight per selected layer, e.g. "1/13"; None = uniform over the set
    normalize: bool = False


@dataclass
class AnalysisConfig:
    size: int = 200
    seed: int = 1


@dataclass
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    distill: DistillSection = field(default_factory=DistillSection)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(3000, 900, 2e-4, 2e-2))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(1500, 300, 1e-4, 0.0))
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_dict() if isinstance(value, ModelConfig) else asdict(value)
        return out


def _merge(default, data, where: str):
    """``default`` with the keys of ``data`` replaced, recursing into sections."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(default)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        if is_dataclass(current):
            value = _merge(current, value, f"{where}.{name}")
        kwargs[name] = value
    try:
        return replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _merge(ExperimentConfig(), data, "config")
    try:
        cfg.corpus.validate()
        cfg.stage1.validate()
        cfg.stage2.validate()
        cfg.pruning.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.model.input_dim != cfg.corpus.input_dim:
        raise ConfigError(f"model.input_dim={cfg.model.input_dim} differs from corpus.input_dim={cfg.corpus.input_dim}")
    if cfg.distill.mode not in MODES:
        raise ConfigError(f"distill.mode must be one of {MODES}, got {cfg.distill.mode!r}")
    if cfg.calibration.pooling not in POOLING:
        raise ConfigError(f"calibration.pooling must be one of {POOLING}, got {cfg.calibration.pooling!r}")
    return cfg


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    """Defaults when ``path`` is None; otherwise the file merged over them."""
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(data)
