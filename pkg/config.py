"""
Configuration for karyosim.

Environment-level settings live in the Config classes (loaded from the process
environment and an optional .env file). Experiment settings come from a JSON
run configuration parsed into the dataclasses below.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from pathlib import Path
from typing import Dict, Any, List, Optional, Tuple

from dotenv import load_dotenv

from exceptions import ConfigInvalid
from models import Arm

load_dotenv()


class Config:
    """Base configuration class."""

    APP_NAME = 'karyosim'
    APP_VERSION = '1.0.0'

    LOG_LEVEL = os.environ.get('KARYOSIM_LOG_LEVEL', 'INFO').upper()
    WORKDIR = os.environ.get('KARYOSIM_WORKDIR', 'data')
    TORCH_THREADS = int(os.environ.get('KARYOSIM_TORCH_THREADS', 1))
    SLOW_TESTS = os.environ.get('KARYOSIM_SLOW_TESTS', '0') == '1'


class DevelopmentConfig(Config):
    """Development configuration."""

    LOG_LEVEL = os.environ.get('KARYOSIM_LOG_LEVEL', 'DEBUG').upper()


class ProductionConfig(Config):
    """Production configuration."""

    LOG_LEVEL = os.environ.get('KARYOSIM_LOG_LEVEL', 'INFO').upper()


class TestingConfig(Config):
    """Testing configuration."""

    LOG_LEVEL = os.environ.get('KARYOSIM_LOG_LEVEL', 'WARNING').upper()
    WORKDIR = os.environ.get('KARYOSIM_WORKDIR', 'test_data')


config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': ProductionConfig
}


def get_config() -> Config:
    """
    Get current configuration based on environment.

    Returns:
        Configuration instance selected by KARYOSIM_ENV
    """
    env = os.environ.get('KARYOSIM_ENV', 'default')
    config_class = config.get(env, config['default'])
    return config_class()


def configure_logging(level: str = None):
    """Configure root logging once for CLI and script entry points."""
    level = level or get_config().LOG_LEVEL
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s'
    )


# ============================================================================
# RUN CONFIGURATION
# ============================================================================

@dataclass
class PhantomConfig:
    """Phantom rendering parameters."""
    canvas: Tuple[int, int] = (64, 64)
    length_range: Tuple[int, int] = (34, 46)
    width_range: Tuple[int, int] = (8, 11)
    max_bend: float = 0.3
    straight_fraction: float = 0.5
    noise_std: float = 0.02
    blur_sigma: float = 0.6
    template_samples: int = 64

    def validate(self):
        if self.canvas[0] < 16 or self.canvas[1] < 16:
            raise ConfigInvalid(f"phantom.canvas too small: {self.canvas}")
        if not 0 < self.length_range[0] <= self.length_range[1] < self.canvas[0]:
            raise ConfigInvalid(f"phantom.length_range invalid for canvas: {self.length_range}")
        if not 0 < self.width_range[0] <= self.width_range[1]:
            raise ConfigInvalid(f"phantom.width_range invalid: {self.width_range}")
        if not 0.0 <= self.straight_fraction <= 1.0:
            raise ConfigInvalid("phantom.straight_fraction must lie in [0,1]")
        if self.noise_std < 0 or self.blur_sigma < 0:
            raise ConfigInvalid("phantom.noise_std and phantom.blur_sigma must be >= 0")


@dataclass
class SplitConfig:
    """Per-class sample counts."""
    train_normal: int = 2000
    imbalance_ratio: float = 100.0
    val_normal: int = 50
    val_abnormal: int = 10
    test_normal: int = 200
    test_abnormal: int = 50

    @property
    def train_abnormal(self) -> int:
        return max(1, int(round(self.train_normal / self.imbalance_ratio)))

    def validate(self):
        for name in ('train_normal', 'val_normal', 'val_abnormal', 'test_normal', 'test_abnormal'):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"split.{name} must be >= 1")
        if self.imbalance_ratio < 1:
            raise ConfigInvalid("split.imbalance_ratio must be >= 1")


@dataclass
class PerturbConfig:
    """Synthetic abnormal pool parameters."""
    per_class: int = 200
    mac_threshold: float = 85.0
    mac_samples: int = 6
    interval_fractions: Tuple[float, float] = (1 / 20, 1 / 5)
    binarize_threshold: float = 0.9
    merge_distance: float = 2.0
    min_branch_length: int = 8
    mac_normalization: str = 'literal'

    def validate(self):
        if self.per_class < 1:
            raise ConfigInvalid("perturb.per_class must be >= 1")
        if not -100 <= self.mac_threshold <= 100:
            raise ConfigInvalid("perturb.mac_threshold must lie in [-100, 100]")
        if self.mac_samples < 2:
            raise ConfigInvalid("perturb.mac_samples must be >= 2")
        lo, hi = self.interval_fractions
        if not 0 < lo <= hi < 1:
            raise ConfigInvalid(f"perturb.interval_fractions invalid: {self.interval_fractions}")
        if not 0 < self.binarize_threshold < 1:
            raise ConfigInvalid("perturb.binarize_threshold must lie in (0,1)")
        if self.mac_normalization not in ('literal', 'mean'):
            raise ConfigInvalid("perturb.mac_normalization must be 'literal' or 'mean'")


@dataclass
class ScheduleConfig:
    """Mean-reverting SDE schedule."""
    steps: int = 100
    sigma_max: float = 10 / 255
    lam: float = 2 / 255

    def validate(self):
        if self.steps < 2 or self.sigma_max <= 0 or self.lam <= 0:
            raise ConfigInvalid(f"schedule requires steps >= 2, sigma_max > 0, lam > 0: {self}")


@dataclass
class RestoreConfig:
    """Denoiser training and restoration parameters."""
    iterations: int = 5000
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = 'adam'
    betas: Tuple[float, float] = (0.9, 0.99)
    decay_at: Optional[int] = None
    clip_norm: float = 1.0
    norm: str = 'l1'
    widths: Tuple[int, int, int] = (8, 16, 32)
    train_pairs: int = 200
    holdout_pairs: int = 50
    stochastic: bool = True

    def validate(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigInvalid("restore.iterations and restore.batch_size must be >= 1")
        if self.optimizer not in ('sgd', 'adam'):
            raise ConfigInvalid("restore.optimizer must be 'sgd' or 'adam'")
        if self.norm not in ('l1', 'l2'):
            raise ConfigInvalid("restore.norm must be 'l1' or 'l2'")
        if self.train_pairs < 1:
            raise ConfigInvalid("restore.train_pairs must be >= 1")


@dataclass
class EasConfig:
    """Energy-guided adaptive sampling configuration."""
    temperature: float = 1.0
    margin_normal: float = -27.0
    margin_abnormal: float = -5.0
    loss_weight: float = 0.1
    recall_level: float = 0.7
    epochs: int = 30
    warmup: int = 5
    interval: int = 5
    momentum: float = 0.9
    normal_cap: int = 2000
    batch_size: int = 64
    learning_rate: float = 5e-3
    sgd_momentum: float = 0.9

    def validate(self):
        if not self.margin_normal < self.margin_abnormal:
            raise ConfigInvalid(f"eas requires m_n < m_ab, got {self.margin_normal} >= {self.margin_abnormal}")
        if self.temperature <= 0:
            raise ConfigInvalid("eas.temperature must be > 0")
        if not 0 < self.recall_level <= 1:
            raise ConfigInvalid("eas.recall_level must lie in (0,1]")
        if self.epochs < 1 or self.interval < 1:
            raise ConfigInvalid("eas.epochs and eas.interval must be >= 1")
        if not 0 <= self.momentum <= 1:
            raise ConfigInvalid("eas.momentum must lie in [0,1]")
        if self.normal_cap < 1 or self.batch_size < 1:
            raise ConfigInvalid("eas.normal_cap and eas.batch_size must be >= 1")

    def validate_warmup(self):
        """Run configurations require w <= T; library callers may pass w > T to disable sampling."""
        if self.warmup > self.epochs:
            raise ConfigInvalid(f"eas.warmup ({self.warmup}) exceeds eas.epochs ({self.epochs})")


@dataclass
class DetectorConfig:
    """Classifier architecture."""
    widths: Tuple[int, int] = (8, 16)


@dataclass
class RunConfig:
    """Complete experiment configuration."""
    seed: int
    workdir: str = 'data'
    classes: List[int] = field(default_factory=lambda: [0, 1, 2, 3])
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    restore: RestoreConfig = field(default_factory=RestoreConfig)
    eas: EasConfig = field(default_factory=EasConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    arms: List[str] = field(default_factory=lambda: [a.value for a in Arm])
    workers: int = 1

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    def validate(self):
        if not isinstance(self.seed, int):
            raise ConfigInvalid("seed is mandatory and must be an integer")
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise ConfigInvalid(f"classes must be a non-empty list of distinct ids: {self.classes}")
        for arm in self.arms:
            try:
                Arm(arm)
            except ValueError:
                raise ConfigInvalid(f"unknown arm '{arm}'")
        if self.workers < 1:
            raise ConfigInvalid("workers must be >= 1")
        for section in (self.phantom, self.split, self.perturb, self.schedule, self.restore, self.eas):
            section.validate()
        self.eas.validate_warmup()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_SECTIONS = {
    'phantom': PhantomConfig,
    'split': SplitConfig,
    'perturb': PerturbConfig,
    'schedule': ScheduleConfig,
    'restore': RestoreConfig,
    'eas': EasConfig,
    'detector': DetectorConfig,
}


def _build_section(cls, data: Dict[str, Any], name: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigInvalid(f"unknown keys in '{name}': {sorted(unknown)}")
    values = {}
    for key, value in data.items():
        default = getattr(cls(), key) if key in known else None
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        values[key] = value
    return cls(**values)


def run_config_from_dict(data: Dict[str, Any], seed: int = None) -> RunConfig:
    """
    Build and validate a RunConfig from a parsed JSON document.

    Args:
        data: JSON object mirroring RunConfig
        seed: optional override of data['seed']

    Returns:
        Validated RunConfig
    """
    data = dict(data)
    if seed is not None:
        data['seed'] = seed
    if 'seed' not in data:
        raise ConfigInvalid("seed is mandatory")
    top = {f.name for f in fields(RunConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigInvalid(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigInvalid(f"section '{key}' must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        run_config = RunConfig(**kwargs)
    except TypeError as e:
        raise ConfigInvalid(str(e))
    return run_config.validate()


def load_run_config(path: str, seed: int = None) -> RunConfig:
    """Load a RunConfig from a JSON file."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigInvalid("config document must be a JSON object")
    return run_config_from_dict(data, seed)
