# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Experiment configuration: pydantic models, YAML loading and overrides."""

import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, MutableMapping, Optional, Union

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "PCLAB__"
ENV_SEPARATOR = "__"
HASH_LENGTH = 12

ExperimentKind = Literal["direct", "cluster", "taylor", "s_table", "moment", "sweep", "oracle1d", "locality"]
SweepAxis = Literal["T", "h", "L", "N", "n"]
KIND_ALIASES = {"jc": "moment"}


class _Section(BaseModel):
    """Base config section."""

    model_config = ConfigDict(
        # unknown keys are typos, never silently ignored
        extra="forbid",
        frozen=True,
    )


class PhysicsConfig(_Section):
    """Box, grid, process and massive-equation parameters."""

    d: int = Field(1, ge=1, le=3, description="Space dimension.")
    L: float = Field(20.0, gt=0, description="Box side length.")
    n: int = Field(200, ge=2, description="Grid cells per side.")
    h: float = Field(0.1, ge=0, description="Discretization step; 0 samples a Poisson process.")
    intensity: float = Field(0.3, ge=0, description="Point intensity lambda.")
    T: float = Field(4.0, gt=0, description="Massive parameter.")
    direction: Optional[List[float]] = Field(None, description="Unit direction e; defaults to the first axis.")
    production: bool = Field(False, description="Require grid spacing <= 1/4.")

    @field_validator("direction")
    def validate_direction(cls, direction):  # noqa: N805  # pydantic wants 'cls' as first arg
        """Direction must be a unit vector."""
        if direction is not None and abs(math.sqrt(sum(c * c for c in direction)) - 1.0) > 1e-12:
            raise ValueError(f"direction {direction} is not a unit vector")
        return direction

    @property
    def e(self) -> List[float]:
        if self.direction is not None:
            return list(self.direction)
        return [1.0] + [0.0] * (self.d - 1)


class MaterialConfig(_Section):
    """Two-phase material and ellipticity band."""

    alpha: float = Field(1.0, gt=0)
    beta: float = Field(4.0, gt=0)
    A1: Optional[List[List[float]]] = Field(None, description="Background matrix; alpha Id if unset.")
    A2: Optional[List[List[float]]] = Field(None, description="Inclusion matrix; beta Id if unset.")
    background: Literal["constant", "checkerboard"] = "constant"
    checkerboard_period: float = Field(2.0, gt=0)
    checkerboard_high: Optional[float] = Field(None, gt=0, description="Second checkerboard value.")

    @model_validator(mode="after")
    def check_band(self):
        """alpha <= beta."""
        if self.alpha > self.beta:
            raise ValueError(f"alpha={self.alpha} exceeds beta={self.beta}")
        return self


class SolverConfig(_Section):
    """Linear solver and subset-corrector settings."""

    tolerance: float = Field(1e-10, gt=0, lt=1)
    max_iterations: Optional[int] = Field(None, ge=1)
    face_rule: Literal["harmonic", "arithmetic"] = "harmonic"
    check_energy: bool = True
    window: bool = Field(False, description="Solve subset correctors on localized windows.")
    c1: float = Field(1.0, gt=0)
    eps_loc: float = Field(1e-6, gt=0, lt=1)
    subset_cap: int = Field(8, ge=0, le=20)
    cache_cells: int = Field((2 * 1024**3) // 8, ge=1)


class MonteCarloConfig(_Section):
    """Realization count, seed and error bars."""

    n_realizations: int = Field(10, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    confidence: float = Field(0.95, gt=0, lt=1)
    workers: int = Field(1, ge=1)
    max_failure_rate: float = Field(0.01, ge=0, le=1)


class TruncationConfig(_Section):
    """Cluster truncation radius: explicit, or c0 sqrt(T) ln(1/eps)."""

    rho: Optional[float] = Field(None, gt=0)
    c0: float = Field(1.0, gt=0)
    eps: float = Field(1e-6, gt=0, lt=1)
    doubling_check: bool = False


class ExpansionConfig(_Section):
    """Orders, thinning values and the set function of the moment inequality."""

    p: float = Field(1.0, ge=0, le=1)
    p_grid: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4])
    max_order: int = Field(1, ge=0, le=8)
    k: int = Field(1, ge=0, le=3)
    form: Optional[Literal["cluster", "alternating"]] = Field(
        None, description="Coefficient form; follows the face rule if unset."
    )
    with_bound: bool = True
    full_matrix: bool = False
    oracle_tolerance: float = Field(0.02, gt=0)
    moment_a: List[int] = Field(default_factory=lambda: [1, 2, 3])
    moment_b: int = Field(1, ge=1)
    moment_c: int = Field(1, ge=1)
    functional: Literal["sum", "product", "zero"] = "sum"
    kappa: float = Field(1.0, gt=0)
    anchor: Optional[List[float]] = None

    @field_validator("p_grid")
    def validate_p_grid(cls, p_grid):  # noqa: N805  # pydantic wants 'cls' as first arg
        """All p values must lie in [0, 1]."""
        if any(not 0 <= p <= 1 for p in p_grid):
            raise ValueError(f"p values must lie in [0, 1], got {p_grid}")
        return p_grid

    @field_validator("moment_a")
    def validate_moment_a(cls, moment_a):  # noqa: N805  # pydantic wants 'cls' as first arg
        """Orders of the moment inequality start at 1."""
        if not moment_a or min(moment_a) < 1:
            raise ValueError(f"moment_a needs orders >= 1, got {moment_a}")
        return moment_a


class LocalityConfig(_Section):
    """Local phase-swap response."""

    site: Optional[List[float]] = Field(None, description="Cube corner; box center if unset.")
    T_factor: float = Field(4.0, gt=1)
    expected_ratio: float = Field(0.5, gt=0)
    ratio_tolerance: float = Field(0.3, gt=0)


class SweepConfig(_Section):
    """Axis sweep: which experiment to repeat and along what."""

    axis: Optional[SweepAxis] = None
    values: List[float] = Field(default_factory=list)
    base_kind: Literal["direct", "cluster", "oracle1d", "moment"] = "direct"

    @field_validator("base_kind", mode="before")
    def accept_jc(cls, base_kind):  # noqa: N805  # pydantic wants 'cls' as first arg
        """`jc` is another name for the moment inequality."""
        return KIND_ALIASES.get(base_kind, base_kind) if isinstance(base_kind, str) else base_kind


class OutputConfig(_Section):
    directory: str = "results"
    write_fields: bool = False


class ExperimentConfig(_Section):
    """Complete description of one experiment."""

    kind: ExperimentKind = "direct"
    physics: PhysicsConfig = Field(default_factory=PhysicsConfig)
    materials: MaterialConfig = Field(default_factory=MaterialConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    monte_carlo: MonteCarloConfig = Field(default_factory=MonteCarloConfig)
    truncation: TruncationConfig = Field(default_factory=TruncationConfig)
    expansion: ExpansionConfig = Field(default_factory=ExpansionConfig)
    locality: LocalityConfig = Field(default_factory=LocalityConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @field_validator("kind", mode="before")
    def accept_jc(cls, kind):  # noqa: N805  # pydantic wants 'cls' as first arg
        """`jc` is another name for the moment inequality."""
        return KIND_ALIASES.get(kind, kind) if isinstance(kind, str) else kind

    @model_validator(mode="after")
    def check_consistency(self):
        """Cross-field constraints between box, grid, process and direction."""
        physics = self.physics
        if physics.h > 0:
            ratio = physics.L / physics.h
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ValueError(f"L/h must be an integer, got L={physics.L}, h={physics.h}")
            q = physics.intensity * physics.h**physics.d
            if q > 1:
                raise ValueError(f"lambda * h^d must be at most 1, got {q}")
        per_length = physics.n / physics.L
        if abs(per_length - round(per_length)) > 1e-9 * max(1.0, per_length):
            raise ValueError(f"n must be a multiple of L, got n={physics.n}, L={physics.L}")
        if physics.production and physics.L / physics.n > 0.25:
            raise ValueError(f"grid spacing {physics.L / physics.n} exceeds 1/4 in production mode")
        if physics.direction is not None and len(physics.direction) != physics.d:
            raise ValueError(f"direction has {len(physics.direction)} components for d={physics.d}")
        for name in ("A1", "A2"):
            matrix = getattr(self.materials, name)
            if matrix is not None and (len(matrix) != physics.d or any(len(r) != physics.d for r in matrix)):
                raise ValueError(f"materials.{name} must be {physics.d}x{physics.d}")
        if self.kind == "sweep" and self.sweep.axis is None:
            raise ValueError("sweep experiments need sweep.axis")
        if self.expansion.form == "cluster" and self.solver.face_rule == "harmonic" and self.highest_order >= 2:
            raise ValueError(
                f"the cluster form needs arithmetic faces beyond order 1 (order {self.highest_order} "
                "requested); use expansion.form=alternating or solver.face_rule=arithmetic"
            )
        return self

    @property
    def run_id(self) -> str:
        return config_hash(self)

    @property
    def highest_order(self) -> int:
        """Largest coefficient order the experiment evaluates."""
        kind = self.sweep.base_kind if self.kind == "sweep" else self.kind
        if kind in ("cluster", "oracle1d"):
            return self.expansion.max_order
        if kind == "taylor":
            return self.expansion.k + 1 if self.expansion.with_bound else self.expansion.k
        return 0

    @property
    def coefficient_form(self) -> str:
        """Explicit form, else cluster under arithmetic faces and alternating under harmonic ones."""
        if self.expansion.form is not None:
            return self.expansion.form
        return "cluster" if self.solver.face_rule == "arithmetic" else "alternating"


def config_hash(config: ExperimentConfig) -> str:
    """First hex digits of the sha256 of the canonical JSON dump.

    The output section and the worker count do not change results and are left out.
    """
    data = config.model_dump(mode="json", exclude={"output": True, "monte_carlo": {"workers"}})
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LENGTH]


def _set_path(data: MutableMapping[str, Any], path: List[str], value: Any) -> None:
    node = data
    for key in path[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[path[-1]] = value


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Nested overrides from PCLAB__SECTION__KEY=value variables, values parsed as YAML."""
    environ = os.environ if environ is None else environ
    overrides: Dict[str, Any] = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in name[len(ENV_PREFIX) :].split(ENV_SEPARATOR) if part]
        if not path:
            continue
        # keep the case of physics fields such as T and L
        path = [_restore_case(part) for part in path]
        _set_path(overrides, path, yaml.safe_load(raw))
        logger.debug("config override from %s", name)
    return overrides


_CASED_FIELDS = {"t": "T", "l": "L", "a1": "A1", "a2": "A2", "t_factor": "T_factor"}


def _restore_case(part: str) -> str:
    return _CASED_FIELDS.get(part, part)


def merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; `overrides` wins."""
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def validate_config(data: Mapping[str, Any]) -> ExperimentConfig:
    """Validate raw data, turning pydantic errors into `ConfigError` with a field path."""
    try:
        return ExperimentConfig.model_validate(dict(data))
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        path = ".".join(str(p) for p in first["loc"]) or None
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        logger.debug("config validation failed: %s", details)
        raise ConfigError(details, path) from e


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """YAML file, then environment overrides, then explicit overrides."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping")
        data = loaded or {}
    data = merge(data, env_overrides(environ))
    if overrides:
        data = merge(data, overrides)
    return validate_config(data)


def with_axis(config: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    """Copy of `config` with one sweep axis set; L keeps the cells per unit length."""
    data = config.model_dump(mode="json")
    if axis == "T":
        data["physics"]["T"] = float(value)
    elif axis == "h":
        data["physics"]["h"] = float(value)
    elif axis == "n":
        data["physics"]["n"] = int(value)
    elif axis == "L":
        per_length = config.physics.n / config.physics.L
        data["physics"]["L"] = float(value)
        data["physics"]["n"] = int(round(per_length * float(value)))
    elif axis == "N":
        data["monte_carlo"]["n_realizations"] = int(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}", "sweep.axis")
    return validate_config(data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)
