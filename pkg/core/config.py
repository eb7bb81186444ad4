"""
Run configuration: presets, JSON config files and validation.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from core.hrnn import ModelConfig
from core.query_log import LastClickScope
from core.ranker_training import TrainConfig
from core.synthlog import GenConfig
from core.text_repr import Weighting

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values in a run configuration."""
    pass


PRESETS: Dict[str, Dict[str, int]] = {
    "full": {"d_e": 300, "d_s1": 300, "d_s2": 600, "d_a": 1024, "d_f": 64},
    "desk": {"d_e": 50, "d_s1": 32, "d_s2": 64, "d_a": 64, "d_f": 16},
}


@dataclass
class SplitConfig:
    """How sessions are divided into profile, train, validation and test."""
    min_sessions: int = 4
    profile_fraction: float = 0.5
    profile_boundary_ts: Optional[int] = None
    train_test_ratio: Tuple[int, int] = (5, 1)
    validation_fraction: float = 0.2

    def __post_init__(self):
        self.train_test_ratio = tuple(self.train_test_ratio)
        if self.min_sessions < 1:
            raise ConfigError("min_sessions must be >= 1")
        if not 0.0 <= self.profile_fraction < 1.0:
            raise ConfigError("profile_fraction must be in [0, 1)")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)")
        if len(self.train_test_ratio) != 2 or min(self.train_test_ratio) < 1:
            raise ConfigError("train_test_ratio must be two positive integers")

    def split_kwargs(self) -> dict:
        return {
            "profile_fraction": self.profile_fraction,
            "profile_boundary_ts": self.profile_boundary_ts,
            "train_test_ratio": self.train_test_ratio,
            "validation_fraction": self.validation_fraction,
        }


@dataclass
class PtmConfig:
    """Topic-model baseline settings."""
    n_topics: int = 10
    iterations: int = 500
    alpha: Optional[float] = None
    beta: float = 0.01
    lam: float = 1.0
    sigma: float = 1.0
    epsilon: float = 0.01

    def __post_init__(self):
        if self.n_topics < 1:
            raise ConfigError("n_topics must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.beta <= 0 or self.sigma <= 0 or self.epsilon <= 0:
            raise ConfigError("beta, sigma and epsilon must be > 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError("alpha must be > 0")


@dataclass
class RunConfig:
    """Everything one CLI invocation needs."""
    log: Optional[str] = None
    docs: Optional[str] = None
    embeddings: Optional[str] = None
    stopwords: Optional[str] = None
    checkpoint: Optional[str] = None
    out: str = "out"
    seed: int = 0
    threads: int = 1
    preset: str = "full"
    segment_sessions: bool = False
    session_gap: int = 30 * 60
    last_click_scope: LastClickScope = LastClickScope.SESSION
    weighting: Weighting = Weighting.TFIDF
    min_count: int = 1
    avg_click_mode: str = "per_query"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    ptm: PtmConfig = field(default_factory=PtmConfig)
    synth: GenConfig = field(default_factory=GenConfig)

    def __post_init__(self):
        if isinstance(self.last_click_scope, str):
            self.last_click_scope = LastClickScope(self.last_click_scope)
        if isinstance(self.weighting, str):
            self.weighting = Weighting(self.weighting)
        if self.preset not in PRESETS:
            raise ConfigError(f"Unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.avg_click_mode not in ("per_query", "per_click"):
            raise ConfigError("avg_click_mode must be per_query or per_click")

    def to_dict(self) -> dict:
        data = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ModelConfig):
                value = value.to_dict()
            elif f.name in ("train", "split", "ptm", "synth"):
                value = {k: getattr(v, "value", v) for k, v in asdict(value).items()}
            elif hasattr(value, "value"):
                value = value.value
            data[f.name] = value
        return data


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "split": SplitConfig,
    "ptm": PtmConfig,
    "synth": GenConfig,
}


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown {where} keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {where} settings: {e}")


def preset_model(preset: str, **overrides) -> ModelConfig:
    """ModelConfig with the preset's widths, then ``overrides``."""
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset {preset!r}")
    values = dict(PRESETS[preset])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return _build(ModelConfig, values, "model")


def config_from_dict(data: dict) -> RunConfig:
    """
    RunConfig from a JSON-style dict; nested sections override defaults key by key.

    Raises:
        ConfigError: On unknown keys or invalid values
    """
    data = dict(data)
    preset = data.get("preset", "full")
    sections = {}
    for name, cls in _SECTIONS.items():
        section = data.pop(name, {}) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"Section {name!r} must be an object")
        if name == "model":
            sections[name] = preset_model(preset, **section)
        else:
            sections[name] = _build(cls, section, name)
    run = _build(RunConfig, data, "top-level")
    return replace(run, **sections)


def load_config(path: str) -> RunConfig:
    """
    Read a JSON run configuration.

    Raises:
        ConfigError: If the file is unreadable, not an object, or has unknown keys
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must contain a JSON object")
    config = config_from_dict(data)
    logger.debug(f"Loaded run config from {Path(path).resolve()}")
    return config
