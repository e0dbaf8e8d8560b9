import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10: API-identical backport
    import tomli as tomllib

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

load_dotenv()


class Config:
    # Process-level settings, overridable through the environment or a .env file
    LOG_LEVEL = os.getenv('STDIFF_LOG_LEVEL', 'INFO').upper()
    DEVICE = os.getenv('STDIFF_DEVICE', 'cpu')
    NUM_THREADS = int(os.getenv('STDIFF_NUM_THREADS', '1'))
    OUTPUT_DIR = os.getenv('STDIFF_OUTPUT_DIR', 'runs')
    DEFAULT_TRIALS = int(os.getenv('STDIFF_DEFAULT_TRIALS', '5'))
    ENCODER_CACHE_SIZE = int(os.getenv('STDIFF_ENCODER_CACHE_SIZE', '4'))

    # Numerical constants
    GAMMA_FLOOR = 1e-4
    REVIN_EPS = 1e-5
    DB3_GATE = 1e-12
    DB3_PRECISION_DIGITS = 50
    CI_Z = 1.96


class STDiffError(Exception):
    """Base error for the seasonal-trend diffusion toolkit"""


class ConfigError(STDiffError):
    pass


class DataError(STDiffError):
    pass


class ShapeError(STDiffError):
    pass


class ScheduleError(STDiffError):
    pass


class CheckpointError(STDiffError):
    pass


class TrainingDivergedError(STDiffError):
    pass


class MetricError(STDiffError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class DataConfig(_Section):
    path: Optional[str] = None
    feature_columns: Optional[List[str]] = None
    window: int = Field(24, ge=1)
    stride: int = Field(1, ge=1)


class DiffusionConfig(_Section):
    steps: int = Field(500, ge=1)
    schedule: Literal['linear', 'cosine'] = 'linear'
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: Literal['posterior', 'beta'] = 'posterior'


class LMAConfig(_Section):
    enabled: bool = True
    kernels: List[int] = Field(default_factory=lambda: [1, 2, 4, 6, 12])
    global_weights: bool = False
    hidden: int = Field(16, ge=1)


class TrendConfig(_Section):
    layers: int = Field(2, ge=0)
    hidden_mult: int = Field(2, ge=1)
    activation: Literal['gelu', 'silu', 'tanh'] = 'gelu'


class WaveletConfig(_Section):
    levels: Union[int, Literal['auto']] = 'auto'
    reg_weight: float = Field(0.1, ge=0.0)
    init: Literal['db3'] = 'db3'
    learnable: bool = True
    shared: bool = True


class AttentionConfig(_Section):
    heads: int = Field(1, ge=1)
    dk: Optional[int] = None


class CorrectionConfig(_Section):
    enabled: bool = True
    residual: bool = False
    dk: Optional[int] = None


class ModelConfig(_Section):
    width: int = Field(32, ge=1)
    parameterization: Literal['predict_x0', 'predict_eps'] = 'predict_x0'


class TrainConfig(_Section):
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    cosine_decay: bool = True
    checkpoint_every: int = Field(0, ge=0)


class MetricsConfig(_Section):
    trials: int = Field(default_factory=lambda: Config.DEFAULT_TRIALS, ge=1)
    iterations: int = Field(2000, ge=1)
    eval_batch_size: int = Field(128, ge=1)
    encoder_width: int = Field(32, ge=1)
    encoder_steps: int = Field(300, ge=0)
    encoder_cache: Optional[str] = None
    embedding_file: Optional[str] = None
    subsample: float = Field(1.0, gt=0.0, le=1.0)


class PlotConfig(_Section):
    perplexity: float = Field(30.0, gt=0.0)
    max_points: int = Field(1000, ge=2)
    density_points: int = Field(200, ge=2)


class RunConfig(_Section):
    """Hierarchical run configuration; unknown keys are rejected"""
    seed: int = 0
    output_dir: str = Field(default_factory=lambda: Config.OUTPUT_DIR)
    data: DataConfig = Field(default_factory=DataConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    lma: LMAConfig = Field(default_factory=LMAConfig)
    trend: TrendConfig = Field(default_factory=TrendConfig)
    wavelet: WaveletConfig = Field(default_factory=WaveletConfig)
    attention: AttentionConfig = Field(default_factory=AttentionConfig)
    correction: CorrectionConfig = Field(default_factory=CorrectionConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    plot: PlotConfig = Field(default_factory=PlotConfig)

    @field_validator('lma')
    @classmethod
    def _distinct_kernels(cls, value: LMAConfig) -> LMAConfig:
        if any(k < 1 for k in value.kernels) or len(set(value.kernels)) != len(value.kernels):
            raise ValueError("lma.kernels must be distinct positive integers")
        return value

    def resolved(self) -> Dict[str, Any]:
        """JSON-able view of every key, defaults included"""
        return self.model_dump(mode='json')

    def digest(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def with_overrides(self, overrides: Dict[str, Any]) -> 'RunConfig':
        """Return a validated copy with dotted-key overrides applied (e.g. 'lma.enabled')"""
        data = self.resolved()
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split('.')
            for key in parents:
                if key not in node or not isinstance(node[key], dict):
                    raise ConfigError(f"Unknown config section '{key}' in '{dotted}'")
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"Unknown config key '{dotted}'")
            node[leaf] = value
        return build_run_config(data)


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Parse and validate a TOML run configuration"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Could not parse {path}: {e}") from e
    return build_run_config(data)


def resolve_wavelet_levels(levels: Union[int, str], length: int, filter_length: int = 6) -> int:
    """Largest J with length divisible by 2^J and length/2^J >= filter_length when 'auto'"""
    if levels == 'auto':
        j = 0
        while length % (2 ** (j + 1)) == 0 and length // (2 ** (j + 1)) >= filter_length:
            j += 1
        return j
    j = int(levels)
    if j < 0:
        raise ConfigError(f"wavelet.levels must be >= 0, got {j}")
    if length % (2 ** j) != 0:
        raise ConfigError(f"Window length {length} is not divisible by 2^{j}")
    return j


def ablation_variants(cfg: RunConfig) -> Dict[str, RunConfig]:
    """The full model plus one single-module ablation per learned component"""
    return {
        'full': cfg,
        'no_lma': cfg.with_overrides({'lma.enabled': False}),
        'frozen_wavelet': cfg.with_overrides({'wavelet.learnable': False}),
        'no_correction': cfg.with_overrides({'correction.enabled': False}),
    }
