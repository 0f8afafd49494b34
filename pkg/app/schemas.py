"""
Pydantic schemas for experiment configuration and run artifacts
"""
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict, Any, Literal, Tuple

from app.config import settings


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Plant and excitation
class PlantConfig(StrictModel):
    kind: Literal["scalar_tanh", "two_state_polynomial", "linear", "expression"] = "scalar_tanh"
    parameters: Dict[str, Any] = Field(default_factory=dict)
    expressions: Optional[List[str]] = None
    noise_bound: float = Field(0.0, ge=0)
    noise_law: Literal["uniform_ball", "zero"] = "uniform_ball"
    input_box: Tuple[float, float] = (-1.0, 1.0)
    state_radius: float = Field(1.5, gt=0)

    @field_validator("input_box")
    @classmethod
    def check_input_box(cls, v):
        if v[0] >= v[1]:
            raise ValueError("input_box must satisfy lo < hi")
        return v

    @model_validator(mode="after")
    def check_kind_fields(self):
        if self.kind == "expression" and not self.expressions:
            raise ValueError("expression plants need 'expressions'")
        if self.kind == "linear" and not {"A", "B"} <= set(self.parameters):
            raise ValueError("linear plants need parameters 'A' and 'B'")
        return self

    @property
    def n_x(self) -> int:
        if self.kind == "scalar_tanh":
            return 1
        if self.kind == "two_state_polynomial":
            return 2
        if self.kind == "linear":
            return len(self.parameters["B"])
        return len(self.expressions)


class ExcitationConfig(StrictModel):
    kind: Literal["uniform_random", "grid_sweep", "multilevel"] = "uniform_random"
    length: int = Field(1000, ge=1)
    grid_x: int = Field(20, ge=2)
    grid_u: int = Field(20, ge=2)
    levels: int = Field(5, ge=2)
    hold: int = Field(5, ge=1)
    seed: Optional[int] = None


class KernelConfig(StrictModel):
    kind: Literal["gaussian"] = "gaussian"
    width: float = Field(1.0, gt=0)


# Tuning constants chosen by the designer; estimates come from the data
class TuningConfig(StrictModel):
    c_delta: float = Field(0.01, ge=0)
    c_gamma_star: float = Field(0.1, ge=0)
    c_gamma_g: float = Field(0.1, ge=0)
    c_epsilon: float = Field(0.01, ge=0)
    lambda1_star: float = Field(1.1, gt=0)
    lambda2_star: float = Field(1.1, gt=0)
    beta_star: float = Field(0.0, ge=0)
    gamma_delta_bar: float = Field(0.3, gt=0)
    fraction: float = Field(0.5, gt=0, lt=1)
    sigma_margin: float = Field(1.05, gt=1)
    r_bar: float = Field(0.5, ge=0)
    mu_bar: float = Field(0.9, gt=0, lt=1)
    q: int = Field(10, ge=1)
    N_bar: int = Field(500, ge=1)
    samples: int = Field(default_factory=lambda: settings.SUP_SAMPLES, ge=1)
    x_bar_init: Optional[float] = Field(None, ge=0)
    # forced values bypass selection; runs using them need --force
    sigma: Optional[float] = Field(None, ge=0)
    gamma_delta: Optional[float] = Field(None, gt=0)
    x_bar: Optional[float] = Field(None, gt=0)


class ReferenceSegment(StrictModel):
    t: int
    value: List[float]


class ReferenceConfig(StrictModel):
    kind: Literal["constant", "piecewise", "sinusoid"] = "constant"
    value: List[float] = Field(default_factory=lambda: [0.0])
    segments: List[ReferenceSegment] = Field(default_factory=list)
    amplitude: List[float] = Field(default_factory=lambda: [0.0])
    offset: List[float] = Field(default_factory=lambda: [0.0])
    period: float = Field(100.0, gt=0)
    phase: float = 0.0


class PathsConfig(StrictModel):
    data: Optional[str] = None
    tuning: Optional[str] = None
    out: Optional[str] = None


class SweepConfig(StrictModel):
    """Cartesian product over dotted config paths, e.g. {"tuning.c_delta": [0.01, 0.02]}"""
    parameters: Dict[str, List[Any]] = Field(default_factory=dict)
    workers: Optional[int] = None


class ExperimentConfig(StrictModel):
    name: str = "experiment"
    plant: PlantConfig = Field(default_factory=PlantConfig)
    excitation: ExcitationConfig = Field(default_factory=ExcitationConfig)
    kernel: KernelConfig = Field(default_factory=KernelConfig)
    tuning: TuningConfig = Field(default_factory=TuningConfig)
    mode: Literal["static", "adaptive"] = "static"
    horizon: int = Field(1000, ge=1)
    reference: ReferenceConfig = Field(default_factory=ReferenceConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seed: int = 0
    norm: Literal["l2", "linf"] = "linf"
    empty_slab_policy: Literal["strict", "midpoint"] = "strict"
    x0: Optional[List[float]] = None
    sweep: Optional[SweepConfig] = None

    @model_validator(mode="after")
    def check_dimensions(self):
        n_x = self.plant.n_x
        if self.x0 is not None and len(self.x0) != n_x:
            raise ValueError(f"x0 has {len(self.x0)} components, the plant has {n_x}")
        vectors = [("reference.value", self.reference.value),
                   ("reference.amplitude", self.reference.amplitude),
                   ("reference.offset", self.reference.offset)]
        vectors += [(f"reference.segments[{i}]", s.value) for i, s in enumerate(self.reference.segments)]
        for name, v in vectors:
            if len(v) not in (1, n_x):
                raise ValueError(f"{name} has {len(v)} components, expected 1 or {n_x}")
        return self

    @property
    def excitation_seed(self) -> int:
        return self.seed if self.excitation.seed is None else self.excitation.seed


# Artifacts
class GenerationMetadata(BaseModel):
    plant: Dict[str, Any]
    excitation: Dict[str, Any]
    rows: int
    resets: List[int] = Field(default_factory=list)
    discarded_pairs: int = 0
    config_name: Optional[str] = None


class RunSummary(BaseModel):
    in_ball_fraction: float
    sup_x: float
    x_bar: float
    lambda_fit: Optional[List[float]] = None
    lambda_dropped: List[str] = Field(default_factory=list)
    mean_abs_tracking_error: Optional[float] = None
    tail_tracking_error: Optional[float] = None
    empty_slab_count: int = 0
    robust_violations: int = 0
    first_empty_slab_t: Optional[int] = None
    first_ball_exit_t: Optional[int] = None
    dict_size_final: int = 0
    steps_executed: int = 0
    aborted: bool = False
    stable: bool = True
    mode: str = "static"
    horizon: int = 0
    seed: int = 0
    forced: bool = False
    hypotheses_passed: Optional[bool] = None
