"""
Configuration loader for ddpflow pipelines.

This module handles loading configuration from various sources:
1. Default location: ~/.ddpf/config.yml
2. Custom config file specified by DDPF_CONFIG_PATH environment variable
3. An explicit path passed by the caller (``ddpf --config``)

The file is a flat mapping mirroring :class:`PipelineConfig` field for
field. JSON documents are valid YAML, so both formats load the same way.
Command-line flags override file values.
"""

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml

from .exceptions import ConfigError
from .socp import BACKENDS


@dataclass(frozen=True)
class PipelineConfig:
    """Settings of one generate/place/run cycle."""

    case: str = "synthetic:16"
    seed: int = 0
    t_day: int = 96
    days_train: int = 1
    days_test: int = 1
    v0: float = 1.0
    budgets: List[int] = field(default_factory=list)
    lambda_g: float = 1e-5
    lambda_l: float = 1e3
    tol_pf: float = 1e-10
    max_iter: int = 100
    rank_tol: float = 1e-8
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    solver_max_iter: int = 200000
    backend: str = "clarabel"
    out_dir: str = "ddpf-out"
    scenario_stride: int = 1
    test_scale: float = 0.6
    diversity: float = 0.1
    peak_p: float = 0.02
    workers: int = 1

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values: Optional[Mapping[str, Any]]) -> "PipelineConfig":
        """Build a config from a parsed file; unknown keys are rejected."""
        if values is None:
            return cls()
        if not isinstance(values, Mapping):
            raise ConfigError("configuration must be a mapping of field names to values")
        unknown = sorted(set(values) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls().with_overrides(**values)

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        """Return a copy with the non-``None`` overrides applied and coerced."""
        current = dataclasses.asdict(self)
        for name, value in overrides.items():
            if name not in current:
                raise ConfigError(f"unknown configuration key: {name}")
            if value is not None:
                current[name] = value
        try:
            coerced = {
                f.name: _coerce(f.name, current[f.name], type(getattr(self, f.name)))
                for f in dataclasses.fields(self)
            }
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad configuration value: {e}") from e
        return PipelineConfig(**coerced)

    def validate(self, n: Optional[int] = None) -> "PipelineConfig":
        """Check value ranges; with ``n`` also check budgets lie in 1..n+1."""
        positive = (
            "tol_pf",
            "rank_tol",
            "eps_abs",
            "eps_rel",
            "v0",
            "test_scale",
            "peak_p",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("t_day", "days_train", "days_test", "max_iter", "solver_max_iter",
                     "scenario_stride", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.t_day < 2:
            raise ConfigError("t_day must be at least 2")
        if self.lambda_g < 0 or self.lambda_l < 0:
            raise ConfigError("regularisation weights must be non-negative")
        if not 0 <= self.diversity < 1:
            raise ConfigError("diversity must lie in [0, 1)")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {', '.join(BACKENDS)}")
        if n is not None:
            bad = [b for b in self.budgets if not 1 <= b <= n + 1]
            if bad:
                raise ConfigError(f"budgets {bad} outside 1..{n + 1}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(name: str, value: Any, kind: type) -> Any:
    if name == "budgets":
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return sorted({int(v) for v in value}, reverse=True)
    if kind is bool:
        return bool(value)
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{name} must be an integer, got {value}")
        return int(value)
    return kind(value)


class ConfigLoader:
    """Handles loading and parsing ddpflow configuration files."""

    DEFAULT_CONFIG_PATH = Path.home() / ".ddpf" / "config.yml"

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize the configuration loader.

        Args:
            config_path: Optional path to configuration file. If not provided,
                        checks DDPF_CONFIG_PATH env var, then uses default location.
        """
        if config_path:
            self.config_path = Path(config_path)
        elif os.environ.get("DDPF_CONFIG_PATH"):
            self.config_path = Path(os.environ["DDPF_CONFIG_PATH"])
        else:
            self.config_path = self.DEFAULT_CONFIG_PATH

        self.config: Optional[Dict[str, Any]] = None

    def load(self) -> bool:
        """
        Load the configuration file.

        Returns:
            bool: True if config was loaded successfully, False otherwise.
        """
        if not self.config_path.exists():
            return False

        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                self.config = yaml.safe_load(f) or {}
            return True
        except (yaml.YAMLError, IOError):
            return False

    def pipeline_config(self, **overrides: Any) -> PipelineConfig:
        """
        Build the pipeline configuration from the loaded file plus overrides.

        Args:
            **overrides: Field values taking precedence over the file
                (``None`` entries are ignored).

        Returns:
            PipelineConfig: Validated configuration (budgets are checked
            later, once the network size is known).

        Raises:
            ConfigError: If the file holds unknown keys or bad values.
        """
        return PipelineConfig.from_mapping(self.config).with_overrides(**overrides).validate()


def load_pipeline_config(config_path: Optional[str] = None, **overrides: Any) -> PipelineConfig:
    """Load ``config_path`` (or the default locations) and apply ``overrides``.

    An explicitly named file that can't be read is an error; a missing
    default file just means defaults.
    """
    loader = ConfigLoader(config_path)
    if not loader.load() and config_path:
        raise ConfigError(f"cannot read configuration file {config_path}")
    return loader.pipeline_config(**overrides)
