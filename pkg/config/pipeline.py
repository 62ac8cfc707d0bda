"""Per-run pipeline configuration, loaded from a JSON document."""
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional
import hashlib
import json
import logging

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from control.certificates import sigma_grid
from models.benchmarks import BENCHMARKS, Benchmark, build_benchmark
from models.exceptions import ConfigurationError
from models.system import BoxSet, ControlAffineSystem, StageCost

logger = logging.getLogger(__name__)


class BoxSpec(BaseModel):
    """Either explicit bounds or a symmetric half width."""

    lower: Optional[List[float]] = None
    upper: Optional[List[float]] = None
    half_width: Optional[float] = None

    @model_validator(mode="after")
    def check_bounds(self):
        explicit = self.lower is not None and self.upper is not None
        if explicit == (self.half_width is not None):
            raise ValueError("give either 'lower' and 'upper' or 'half_width'")
        return self

    def to_box(self, dim: int) -> BoxSet:
        if self.half_width is not None:
            return BoxSet.symmetric(self.half_width, dim)
        box = BoxSet(self.lower, self.upper)
        if box.dim != dim:
            raise ConfigurationError(f"box has dimension {box.dim}, system has {dim}")
        return box


class SystemSpec(BaseModel):
    name: str
    parameters: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_registered(self):
        if self.name not in BENCHMARKS:
            raise ValueError(f"system '{self.name}' is not registered, choose from {sorted(BENCHMARKS)}")
        return self


class StageCostSpec(BaseModel):
    Q: List[List[float]]
    R: List[List[float]]


class TrainingSpec(BaseModel):
    degrees: List[int] = [2, 3]
    p: int = 500
    p_test: Optional[int] = None
    max_iterations: int = 60
    w_tol: float = 1e-3
    delta_lstar: float = 1e-4
    seed: int = 0
    ridge: float = 0.0
    init_mode: Literal["fit", "lqr-shortcut"] = "fit"
    init_r_scale: float = Field(default=1.0, gt=0.0)
    fit_policy: bool = True


class CertificationSpec(BaseModel):
    beta: float = Field(default=1.0, gt=0.0)
    M: Optional[int] = Field(default=None, ge=2)
    sigma_min: float = Field(default=0.80, gt=0.0, lt=1.0)
    sigma_max: float = Field(default=0.999, gt=0.0, lt=1.0)
    sigma_step: float = Field(default=0.001, gt=0.0)
    c_override: Optional[float] = Field(default=None, ge=0.0, lt=1.0)


class SimulationSpec(BaseModel):
    N: int = Field(default=10, ge=1)
    steps: int = Field(default=400, ge=1)
    stop_tol: float = 1e-6
    x0: List[List[float]] = Field(default_factory=list)
    terminal: Literal["avi", "lqr"] = "avi"


@dataclass(frozen=True, eq=False)
class ResolvedPipeline:
    """Benchmark objects with the config overrides applied."""

    benchmark: Benchmark
    system: ControlAffineSystem
    cost: StageCost
    state_box: BoxSet
    input_box: BoxSet
    omega: BoxSet


class PipelineConfig(BaseModel):
    """One document drives training, certification and simulation."""

    system: SystemSpec
    state_box: Optional[BoxSpec] = None
    input_box: Optional[BoxSpec] = None
    omega: BoxSpec
    stage_cost: Optional[StageCostSpec] = None
    training: TrainingSpec = Field(default_factory=TrainingSpec)
    certification: CertificationSpec = Field(default_factory=CertificationSpec)
    simulation: SimulationSpec = Field(default_factory=SimulationSpec)
    output_dir: Optional[str] = None

    @model_validator(mode="before")
    @classmethod
    def require_omega(cls, data: Any):
        if isinstance(data, dict) and data.get("omega") is None:
            raise ValueError("Ω required: set 'omega' to the training domain box")
        return data

    def resolve(self) -> ResolvedPipeline:
        try:
            benchmark = build_benchmark(self.system.name, **self.system.parameters)
        except TypeError as e:
            raise ConfigurationError(f"system.parameters: {e}") from e
        n, m = benchmark.system.n, benchmark.system.m

        try:
            state_box = self.state_box.to_box(n) if self.state_box else benchmark.state_box
            input_box = self.input_box.to_box(m) if self.input_box else benchmark.input_box
            omega = self.omega.to_box(n)
        except ValueError as e:
            raise ConfigurationError(f"boxes: {e}") from e
        if not omega.is_subset_of(state_box):
            raise ConfigurationError("omega: training domain must lie inside the state box")

        cost = benchmark.cost
        if self.stage_cost is not None:
            try:
                cost = StageCost(np.array(self.stage_cost.Q), np.array(self.stage_cost.R))
            except ValueError as e:
                raise ConfigurationError(f"stage_cost: {e}") from e
            if cost.n != n or cost.m != m:
                raise ConfigurationError(f"stage_cost: expected Q {n}x{n} and R {m}x{m}")

        for i, x0 in enumerate(self.simulation.x0):
            if len(x0) != n:
                raise ConfigurationError(f"simulation.x0[{i}] has {len(x0)} entries, system has {n}")

        return ResolvedPipeline(benchmark, benchmark.system, cost, state_box, input_box, omega)

    def sigma_grid(self) -> np.ndarray:
        spec = self.certification
        return sigma_grid(spec.sigma_min, spec.sigma_max, spec.sigma_step)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path: str) -> PipelineConfig:
    """Read and validate a pipeline document; errors name the offending field."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config '{path}': {e}") from e
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config '{path}' is not valid JSON: {e}") from e
    try:
        return PipelineConfig.model_validate(document)
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(f"invalid config '{path}': {details}") from e
