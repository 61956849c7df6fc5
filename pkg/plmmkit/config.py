"""
Configuration - Loads config.yaml and validates run options
Path options and CLI run settings are pydantic models built from the yaml defaults
"""

import os
import logging
import tempfile
from typing import Any, Dict, List, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

load_dotenv()

logger = logging.getLogger(__name__)

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_CONFIG_PATH = os.path.join(PROJECT_ROOT, "config.yaml")

TMPDIR_ENV = "PLMMKIT_TMPDIR"

DEFAULT_GAMMA = {"MCP": 3.0, "SCAD": 3.7}


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load the yaml configuration

    Args:
        config_path: Path to a config file. If None, uses the project config.yaml

    Returns:
        Configuration dictionary with relative directories made absolute
    """
    config_path = config_path or DEFAULT_CONFIG_PATH
    if not os.path.isabs(config_path):
        config_path = os.path.abspath(config_path)

    with open(config_path, 'r') as f:
        config = yaml.safe_load(f) or {}

    config_dir = os.path.dirname(config_path)
    for section, key in (("logging", "log_dir"), ("output", "results_dir")):
        value = config.get(section, {}).get(key)
        if value and not os.path.isabs(value):
            config[section][key] = os.path.normpath(os.path.join(config_dir, value))

    return config


def scratch_dir(prefix: str = "plmmkit_") -> str:
    """Create a scratch directory under PLMMKIT_TMPDIR (or the system default)"""
    base = os.getenv(TMPDIR_ENV) or None
    if base:
        os.makedirs(base, exist_ok=True)
    return tempfile.mkdtemp(prefix=prefix, dir=base)


class PathOptions(BaseModel):
    """Options controlling the penalized regression path"""

    penalty: Literal["lasso", "MCP", "SCAD"] = "lasso"
    gamma: Optional[float] = Field(None, description="Concavity; defaults 3.0 (MCP), 3.7 (SCAD)")
    nlambda: int = Field(100, ge=1)
    lambda_min_ratio: Optional[float] = Field(None, gt=0, lt=1)
    tol: float = Field(1e-7, gt=0)
    max_iter: int = Field(10000, ge=1)
    lambdas: Optional[List[float]] = Field(None, description="User lambda sequence")

    @field_validator("penalty", mode="before")
    @classmethod
    def _normalize_penalty(cls, value):
        if isinstance(value, str):
            return {"lasso": "lasso", "mcp": "MCP", "scad": "SCAD"}.get(value.lower(), value)
        return value

    @model_validator(mode="after")
    def _check_penalty_parameters(self):
        if self.gamma is None and self.penalty in DEFAULT_GAMMA:
            self.gamma = DEFAULT_GAMMA[self.penalty]
        if self.penalty == "MCP" and self.gamma <= 1:
            raise ValueError("gamma must be greater than 1 for MCP")
        if self.penalty == "SCAD" and self.gamma <= 2:
            raise ValueError("gamma must be greater than 2 for SCAD")
        if self.lambdas is not None:
            if len(self.lambdas) == 0:
                raise ValueError("lambda sequence is empty")
            if any(lam <= 0 for lam in self.lambdas):
                raise ValueError("lambda sequence must be positive")
            if any(b >= a for a, b in zip(self.lambdas, self.lambdas[1:])):
                raise ValueError("lambda sequence must be strictly decreasing")
        return self

    @property
    def penalty_code(self) -> int:
        return {"lasso": 0, "MCP": 1, "SCAD": 2}[self.penalty]

    @property
    def effective_gamma(self) -> float:
        return float(self.gamma) if self.gamma is not None else 0.0

    def resolve_min_ratio(self, n: int, p: int) -> float:
        if self.lambda_min_ratio is not None:
            return self.lambda_min_ratio
        return 0.001 if n > p else 0.05

    @classmethod
    def from_config(cls, config: Optional[Dict[str, Any]] = None, **overrides) -> "PathOptions":
        """Build options from the `path` section, with keyword overrides"""
        section = dict((config or load_config()).get("path", {}))
        section.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**section)


class RunConfig(BaseModel):
    """Validated settings for one CLI invocation"""

    subcommand: Literal["process", "design", "fit", "cv", "predict", "summary"]
    inputs: Dict[str, Optional[str]] = Field(default_factory=dict)
    output_dir: Optional[str] = None
    path: PathOptions = Field(default_factory=PathOptions)
    nfolds: int = Field(5, ge=2)
    prediction_type: Literal["linear", "blup"] = "blup"
    seed: int = 42
    memory_budget_mb: Optional[float] = Field(None, gt=0)
    block_width: int = Field(1024, ge=1)
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    verbosity: int = 0

    @field_validator("output_dir")
    @classmethod
    def _check_output_dir(cls, value):
        if value is None:
            return value
        os.makedirs(value, exist_ok=True)
        if not os.access(value, os.W_OK):
            raise ValueError(f"Output directory is not writable: {value}")
        return value
