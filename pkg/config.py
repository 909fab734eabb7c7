"""
Configuration system for the noise source estimator.

This module provides a Pydantic-based configuration system supporting
environment variables (NSE_ prefix), .env files, a key=value config file
and defaults. Layering: defaults < config file < environment < CLI flags.
"""

import hashlib
import json
import os
from typing import Any, Dict, Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from tools.utils import read_key_value_file


VARIANTS = ("DrneCust", "WithoutMeta", "MinMeta", "FullMeta")


class NoiseSourceConfig(BaseSettings):
    """Configuration for the noise source estimator."""

    model_config = SettingsConfigDict(
        env_prefix="NSE_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging
    log_level: str = "INFO"
    run_log: str = "nse-run.log"

    # Model
    variant: str = "FullMeta"
    channel_scale: float = 0.25
    patch_size: int = 32

    # Determinism
    seed: int = 0
    threads: int = 1

    # Training
    batch_size: int = 16
    epochs: int = 30
    learning_rate: float = 1e-4
    xi_max: float = 64.0

    # Dataset
    mismatch_prob: float = 0.5
    record_count: int = 2000

    # Real-noise processing
    s_fpn: int = 20

    # Benchmark
    bench_patches: int = 1000
    bench_repetitions: int = 5
    bench_warmup: int = 50

    # Scenarios
    sigma_n: float = 5.0

    @field_validator("log_level")
    @classmethod
    def check_log_level(cls, v):
        level = str(v).upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"unknown log level {v!r}")
        return level

    @field_validator("variant")
    @classmethod
    def check_variant(cls, v):
        for name in VARIANTS:
            if name.lower() == str(v).lower():
                return name
        raise ValueError(f"unknown variant {v!r}; expected one of {', '.join(VARIANTS)}")

    @field_validator("channel_scale", "xi_max", "learning_rate", "sigma_n")
    @classmethod
    def check_positive(cls, v, info):
        if v <= 0:
            raise ValueError(f"{info.field_name} must be > 0")
        return v

    @field_validator("patch_size")
    @classmethod
    def check_patch_size(cls, v):
        if v < 16:
            raise ValueError("patch_size must be >= 16")
        return v

    @field_validator("mismatch_prob")
    @classmethod
    def check_probability(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("mismatch_prob must lie within [0, 1]")
        return v

    @field_validator("threads", "batch_size", "epochs", "bench_patches", "bench_repetitions")
    @classmethod
    def check_at_least_one(cls, v, info):
        if v < 1:
            raise ValueError(f"{info.field_name} must be >= 1")
        return v

    @field_validator("record_count", "bench_warmup", "s_fpn")
    @classmethod
    def check_non_negative(cls, v, info):
        if v < 0:
            raise ValueError(f"{info.field_name} must be >= 0")
        return v

    def as_dict(self) -> Dict[str, Any]:
        """Resolved settings in field order."""
        return self.model_dump()

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump."""
        canonical = json.dumps(self.model_dump(), sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _config_file_values(config_file: Optional[str]) -> Dict[str, Any]:
    """Settings from a key=value file that the environment does not override."""
    if not config_file:
        return {}
    if not os.path.exists(config_file):
        raise FileNotFoundError(f"config file not found: {config_file}")
    values = {}
    for key, value in read_key_value_file(config_file).items():
        name = key.lower()
        if name.startswith("nse_"):
            name = name[4:]
        if name not in NoiseSourceConfig.model_fields:
            continue
        if f"NSE_{name.upper()}" in os.environ:
            continue
        values[name] = value
    return values


# Singleton instance pattern
_config_instance = None


def get_config(config_file: Optional[str] = None, **overrides: Any) -> NoiseSourceConfig:
    """
    Get the NoiseSourceConfig singleton instance.

    Args:
        config_file: Optional key=value config file. Environment variables
                     take precedence over its entries.
        **overrides: CLI-level values; None entries are ignored.

    Returns:
        NoiseSourceConfig instance
    """
    global _config_instance

    overrides = {k: v for k, v in overrides.items() if v is not None}
    if _config_instance is None or config_file or overrides:
        values = _config_file_values(config_file)
        values.update(overrides)
        _config_instance = NoiseSourceConfig(**values)

    return _config_instance


def reset_config() -> None:
    """Drop the singleton (tests)."""
    global _config_instance
    _config_instance = None
