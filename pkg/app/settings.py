"""Benchmark configuration: defaults, presets, key = value files and environment."""

import json
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

PRESETS_PATH = Path(__file__).parent / 'config' / 'presets.json'

ESTIMATOR_ALIASES = {
    'pem-or': 'PEM+OR',
    'pem+or': 'PEM+OR',
    'pem-bic': 'PEM+BIC',
    'pem+bic': 'PEM+BIC',
    'eb': 'EB',
    'fb': 'FB',
}
ALL_ESTIMATORS = ['PEM+OR', 'PEM+BIC', 'EB', 'FB']
ALL_VARIANTS = ['ASYMP', 'LIK']
PRESET_ALIASES = {'full': 'paper'}


def _split(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(',') if part.strip()]
    return value


class BenchConfig(BaseModel):
    """Monte Carlo study configuration."""
    model_config = ConfigDict(extra='forbid', validate_assignment=True)

    runs: int = Field(default=100, ge=1, description="Number of Monte Carlo datasets")
    T: int = Field(default=500, ge=2, description="Data length")
    n: int = Field(default=100, ge=1, description="Impulse-response length")
    order: int = Field(default=30, ge=1, description="True system order")
    pole_radius: float = Field(default=0.95, gt=0.0, lt=1.0, description="Bound on the true poles' magnitude")
    band: float = Field(default=0.8, gt=0.0, le=1.0, description="Normalized input bandwidth")
    snr: float = Field(default=1.0, gt=0.0, description="Noiseless output variance over noise variance")
    alpha: float = Field(default=0.95, gt=0.0, lt=1.0, description="Confidence level")
    samples_N: int = Field(default=7200, ge=1, description="Samples per confidence set")
    fb_burn_in: int = Field(default=3000, ge=1, description="Full Bayes chain burn-in")
    lik_burn_in: int = Field(default=3000, ge=1, description="PEM likelihood chain burn-in")
    bic_order_range: List[int] = Field(default_factory=lambda: list(range(2, 31)), description="Candidate PEM orders")
    master_seed: int = Field(default=0, ge=0, lt=2 ** 64, description="Seed of the whole study")
    estimators: List[str] = Field(default_factory=lambda: list(ALL_ESTIMATORS), description="Estimators to run")
    confidence_variants: List[str] = Field(default_factory=lambda: list(ALL_VARIANTS), description="PEM confidence-set variants")
    sigma2_mode: Literal['estimated', 'true'] = Field(default='estimated', description="Noise variance used by EB, FB and PEM+LIK")
    jobs: int = Field(default=1, ge=1, description="Worker processes")
    record_wall_time: bool = Field(default=False, description="Store wall time per estimator (breaks byte-identical output)")
    dump_chains: bool = Field(default=False, description="Write every MCMC chain to CSV")

    @field_validator('bic_order_range', mode='before')
    @classmethod
    def parse_order_range(cls, value: Any) -> Any:
        """Accept "2..30", "2-30" or a comma-separated list."""
        if isinstance(value, str):
            match = re.fullmatch(r'\s*(\d+)\s*(?:\.\.|-)\s*(\d+)\s*', value)
            if match:
                low, high = int(match.group(1)), int(match.group(2))
                return list(range(low, high + 1))
            return [int(part) for part in _split(value)]
        return value

    @field_validator('bic_order_range')
    @classmethod
    def check_order_range(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("bic_order_range must not be empty")
        if min(value) < 1:
            raise ValueError("bic_order_range must contain orders >= 1")
        return sorted(set(value))

    @field_validator('estimators', mode='before')
    @classmethod
    def parse_estimators(cls, value: Any) -> Any:
        value = _split(value)
        if isinstance(value, list):
            names = []
            for item in value:
                name = ESTIMATOR_ALIASES.get(str(item).strip().lower(), str(item).strip())
                if name not in ALL_ESTIMATORS:
                    raise ValueError(f"Unknown estimator '{item}' (expected one of eb, fb, pem-bic, pem-or)")
                if name not in names:
                    names.append(name)
            return [name for name in ALL_ESTIMATORS if name in names]
        return value

    @field_validator('confidence_variants', mode='before')
    @classmethod
    def parse_variants(cls, value: Any) -> Any:
        value = _split(value)
        if isinstance(value, list):
            variants = [str(item).strip().upper() for item in value]
            unknown = set(variants) - set(ALL_VARIANTS)
            if unknown:
                raise ValueError(f"Unknown confidence variants: {sorted(unknown)}")
            return [variant for variant in ALL_VARIANTS if variant in variants]
        return value

    @model_validator(mode='after')
    def check_lengths(self) -> 'BenchConfig':
        if self.T <= self.n:
            raise ValueError(f"T must exceed n, got T={self.T}, n={self.n}")
        if not self.estimators:
            raise ValueError("At least one estimator is required")
        return self


def load_presets(path: Optional[Path] = None) -> Dict[str, Dict[str, Any]]:
    """Load named presets from presets.json, falling back to built-in values."""
    path = Path(path) if path is not None else PRESETS_PATH
    if not path.exists():
        logger.warning(f"[Config] Presets file not found: {path}, using defaults")
        return _default_presets()
    try:
        with open(path, 'r') as f:
            presets = json.load(f).get('presets', {})
        logger.debug(f"[Config] Loaded {len(presets)} presets from {path}")
        return presets
    except Exception as e:
        logger.error(f"[Config] Error loading presets: {e}")
        return _default_presets()


def _default_presets() -> Dict[str, Dict[str, Any]]:
    return {
        'desk': {'runs': 20, 'samples_N': 2000, 'fb_burn_in': 1000, 'lik_burn_in': 1000},
        'paper': {'runs': 100, 'samples_N': 7200, 'fb_burn_in': 3000, 'lik_burn_in': 3000},
    }


def read_config_file(path: Path) -> Dict[str, str]:
    """Parse a key = value file; blank values are dropped.

    Raises:
        FileNotFoundError: If the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    values = dotenv_values(path)
    return {key.strip(): value for key, value in values.items() if value not in (None, '')}


def load_config(
    config_path: Optional[Path] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    presets_path: Optional[Path] = None,
) -> BenchConfig:
    """Build a BenchConfig from defaults, a preset, a config file and overrides (in that order).

    Args:
        config_path: Optional key = value file
        preset: Optional preset name from presets.json
        overrides: Values that win over everything else (CLI flags); None entries are ignored
        presets_path: Alternative presets file

    Raises:
        ValueError: If the preset is unknown or a value is invalid
        FileNotFoundError: If the config file does not exist
    """
    values: Dict[str, Any] = {}
    if preset is not None:
        presets = load_presets(presets_path)
        preset = PRESET_ALIASES.get(preset, preset) if preset not in presets else preset
        if preset not in presets:
            raise ValueError(f"Unknown preset '{preset}' (available: {sorted(presets)})")
        values.update(presets[preset])
    if config_path is not None:
        values.update(read_config_file(config_path))
    if overrides:
        values.update({key: value for key, value in overrides.items() if value is not None})
    return BenchConfig(**values)


def environment_defaults() -> Dict[str, Optional[str]]:
    """BENCH_JOBS and BENCH_OUT_DIR from the environment (a .env file is honored)."""
    load_dotenv()
    return {
        'jobs': os.getenv('BENCH_JOBS'),
        'out_dir': os.getenv('BENCH_OUT_DIR'),
    }
