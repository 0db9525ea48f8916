import json
import logging
import os
import threading
from contextlib import contextmanager
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator

logger = logging.getLogger(__name__)

POLICY_FILE = os.path.join(os.path.dirname(__file__), "numeric_policy.json")
POLICY_ENV = "QECOPT_NUMERIC_POLICY"
DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
SCHEMA_VERSION = 1


class ConfigError(RuntimeError):
    """Raised for configuration files that are missing, unreadable or invalid."""


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"Configuration file not found at {path}. Please ensure it is present.")
    try:
        with open(path, "r") as f:
            config = json.load(f)
        return config
    except json.JSONDecodeError as e:
        raise ConfigError(f"Failed to load configuration from {path}: line {e.lineno}, column {e.colno}: {e.msg}")
    except Exception as e:
        raise ConfigError(f"Failed to load configuration from {path}: {e}")


class NumericPolicy(BaseModel):
    """Every tolerance and iteration cap shared by the solver, the design loop and the tests."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    symmetry: float = Field(1e-12, gt=0)
    reconstruction: float = Field(1e-10, gt=0)
    linear_solve: float = Field(1e-8, gt=0)
    psd: float = Field(1e-10, gt=0)
    tp_ingest: float = Field(1e-6, gt=0)
    tp_internal: float = Field(1e-10, gt=0)
    unitary: float = Field(1e-8, gt=0)
    duality_measure: float = Field(1e-9, gt=0)
    newton_decrement: float = Field(1e-10, gt=0)
    max_newton_iterations: int = Field(200, ge=1)
    nullspace_cutoff: float = Field(1e-7, gt=0)
    nullspace_cutoff_widened: float = Field(1e-5, gt=0)
    certificate: float = Field(1e-6, gt=0)
    kraus_cutoff: float = Field(1e-8, gt=0)
    dominance_ratio: float = Field(1e-3, gt=0, lt=1)
    relaxation_looseness: float = Field(1e-5, gt=0)
    monotonicity_slack: float = Field(1e-7, ge=0)
    fw_gap: float = Field(1e-6, gt=0)
    fw_max_iterations: int = Field(10000, ge=1)
    pure_restarts: int = Field(64, ge=1)
    design_epsilon: float = Field(1e-6, ge=0)
    design_max_iters: int = Field(100, ge=1)


def load_policy(overrides=None):
    """Shipped defaults, then the file named by QECOPT_NUMERIC_POLICY, then `overrides`."""
    data = load_config(POLICY_FILE)
    env_path = os.environ.get(POLICY_ENV)
    if env_path:
        logger.info(f"Applying numeric policy overrides from {env_path}")
        data.update(load_config(env_path))
    if overrides:
        data.update(overrides)
    try:
        return NumericPolicy(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid numeric policy: {_describe(e)}")


_policy_lock = threading.Lock()
_active_policy = None


def get_policy():
    global _active_policy
    with _policy_lock:
        if _active_policy is None:
            _active_policy = load_policy()
        return _active_policy


@contextmanager
def use_policy(policy):
    """Temporarily install `policy` as the active numeric policy."""
    global _active_policy
    with _policy_lock:
        previous = _active_policy
        _active_policy = policy
    try:
        yield policy
    finally:
        with _policy_lock:
            _active_policy = previous


def _describe(error):
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{loc}: {item['msg']}")
    return "; ".join(parts)


class GeneratorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(ge=0)
    delta_e: float = Field(0.75, gt=0)
    dim_sys: int = Field(4, ge=1)
    dim_bath: int = Field(2, ge=1)


class ChannelSource(BaseModel):
    """One error channel: a channel file, a shipped data set, or a seeded generator."""

    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = None
    shipped: Optional[Literal["error_a", "error_b"]] = None
    generator: Optional[GeneratorSpec] = None

    @field_validator("path")
    @classmethod
    def _resolve_path(cls, value, info: ValidationInfo):
        if value is None:
            return value
        base = (info.context or {}).get("base_dir", os.getcwd())
        resolved = value if os.path.isabs(value) else os.path.normpath(os.path.join(base, value))
        if not os.path.exists(resolved):
            raise ValueError(f"channel file not found: {resolved}")
        return resolved

    @model_validator(mode="after")
    def _exactly_one(self):
        given = [name for name in ("path", "shipped", "generator") if getattr(self, name) is not None]
        if len(given) != 1:
            raise ValueError(f"exactly one of path, shipped, generator is required (got {given or 'none'})")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    mode: Literal["design", "robust", "reproduce", "channel-gen", "fidelity"]
    channels: List[ChannelSource] = Field(default_factory=list)
    encoding: Optional[ChannelSource] = None
    recovery: Optional[ChannelSource] = None
    n_sys: int = Field(2, ge=1)
    target: Optional[List[List[List[float]]]] = None
    epsilon: float = Field(1e-6, gt=0)
    max_iters: int = Field(100, ge=1)
    order: Literal["encoding-first", "recovery-first"] = "encoding-first"
    output_dir: str = "results"
    numeric_policy: dict = Field(default_factory=dict)

    @field_validator("target")
    @classmethod
    def _square_target(cls, value):
        if value is None:
            return value
        n = len(value)
        if n == 0 or any(len(row) != n for row in value):
            raise ValueError("target must be a square matrix of [re, im] pairs")
        if any(len(entry) != 2 for row in value for entry in row):
            raise ValueError("target entries must be [re, im] pairs")
        return value

    @model_validator(mode="after")
    def _consistent(self):
        if self.mode in ("design", "fidelity", "channel-gen") and not self.channels:
            raise ValueError(f"mode {self.mode} needs at least one channel source")
        if self.mode == "robust" and len(self.channels) < 2:
            raise ValueError("mode robust needs at least two channel sources")
        if self.mode == "channel-gen" and any(c.generator is None for c in self.channels):
            raise ValueError("mode channel-gen only accepts generator channel sources")
        dims = {(c.generator.dim_sys, c.generator.dim_bath) for c in self.channels if c.generator is not None}
        if len({d[0] for d in dims}) > 1:
            raise ValueError(f"generator dimensions disagree: {sorted(dims)}")
        if self.target is not None and len(self.target) != self.n_sys:
            raise ValueError(f"target is {len(self.target)}x{len(self.target)} but n_sys is {self.n_sys}")
        try:
            NumericPolicy(**self.numeric_policy)
        except ValidationError as e:
            raise ValueError(f"numeric_policy: {_describe(e)}")
        return self


def load_experiment(path):
    """Read and validate an experiment configuration; relative paths resolve against its directory."""
    raw = load_config(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        config = ExperimentConfig.model_validate(raw, context={"base_dir": base_dir})
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration {path}: {_describe(e)}")
    logger.info(f"✅ Loaded {config.mode} configuration from {path}")
    return config


if __name__ == "__main__":
    print(json.dumps(get_policy().model_dump(), indent=2))
