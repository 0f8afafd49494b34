"""
Synthetic plants, excitation policies and reference signals for the simulator
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.services.set_membership import Norm, TrainingData, sample_ball, vector_norm

logger = logging.getLogger(__name__)


class PlantKind(Enum):
    SCALAR_TANH = "scalar_tanh"
    TWO_STATE_POLYNOMIAL = "two_state_polynomial"
    LINEAR = "linear"
    EXPRESSION = "expression"


class NoiseLaw(Enum):
    UNIFORM_BALL = "uniform_ball"
    ZERO = "zero"


class UnsupportedPlantError(ValueError):
    """Operation needs a closed-form plant map"""


class PlantModel(ABC):
    """
    x_{t+1} = g(x_t, u_t) + e_t with ‖e_t‖ ≤ noise_bound.
    Subclasses provide g; noise and box handling live here.
    """

    kind: PlantKind
    closed_form: bool = True

    def __init__(self, n_x: int, noise_bound: float = 0.0,
                 noise_law: NoiseLaw = NoiseLaw.UNIFORM_BALL,
                 input_box: Tuple[float, float] = (-1.0, 1.0), state_radius: float = 1.5,
                 norm: Norm = Norm.LINF):
        if noise_bound < 0:
            raise ValueError(f"noise_bound must be nonnegative, got {noise_bound}")
        if input_box[0] >= input_box[1]:
            raise ValueError(f"input box must satisfy lo < hi, got {input_box}")
        if state_radius <= 0:
            raise ValueError(f"state_radius must be positive, got {state_radius}")
        self.n_x = int(n_x)
        self.noise_bound = float(noise_bound)
        self.noise_law = NoiseLaw(noise_law)
        self.input_box = (float(input_box[0]), float(input_box[1]))
        self.state_radius = float(state_radius)
        self.norm = Norm(norm)

    @abstractmethod
    def g(self, x: np.ndarray, u: float) -> np.ndarray:
        """Noise-free successor state"""

    @abstractmethod
    def parameters(self) -> Dict[str, Any]:
        pass

    def g_many(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """g over rows of x paired with entries of u"""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.asarray(u, dtype=float).reshape(-1)
        return np.vstack([self.g(x[i], u[i]) for i in range(len(u))])

    def sample_noise(self, rng: np.random.Generator) -> np.ndarray:
        if self.noise_law is NoiseLaw.ZERO or self.noise_bound == 0:
            return np.zeros(self.n_x)
        return sample_ball(rng, 1, self.n_x, self.noise_bound, self.norm)[0]

    def in_state_box(self, x: np.ndarray) -> bool:
        return vector_norm(x, self.norm) <= self.state_radius

    def in_input_box(self, u: float) -> bool:
        return self.input_box[0] <= u <= self.input_box[1]

    def step(self, x, u: float, rng: np.random.Generator, warn: bool = True) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.size != self.n_x:
            raise ValueError(f"Plant expects a state of dimension {self.n_x}, got {x.size}")
        if warn and not self.in_input_box(u):
            logger.warning(f"Input {u:.4g} outside U={self.input_box}")
        if warn and not self.in_state_box(x):
            logger.warning(f"State norm {vector_norm(x, self.norm):.4g} outside X (radius {self.state_radius:.4g})")
        return np.asarray(self.g(x, float(u)), dtype=float).reshape(-1) + self.sample_noise(rng)

    def describe(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "n_x": self.n_x,
            "parameters": self.parameters(),
            "noise_bound": self.noise_bound,
            "noise_law": self.noise_law.value,
            "input_box": list(self.input_box),
            "state_radius": self.state_radius,
        }


class ScalarTanhPlant(PlantModel):
    """x⁺ = a·x + b·tanh(u)"""
    kind = PlantKind.SCALAR_TANH

    def __init__(self, a: float = 0.5, b: float = 1.0, **kwargs):
        super().__init__(n_x=1, **kwargs)
        self.a = float(a)
        self.b = float(b)

    def g(self, x: np.ndarray, u: float) -> np.ndarray:
        return self.a * np.atleast_1d(x) + self.b * np.tanh(u)

    def g_many(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, 1)
        u = np.asarray(u, dtype=float).reshape(-1, 1)
        return self.a * x + self.b * np.tanh(u)

    def parameters(self) -> Dict[str, Any]:
        return {"a": self.a, "b": self.b}


class TwoStatePolynomialPlant(PlantModel):
    """
    x1⁺ = a1·x1 + c12·x1·x2 + b1·u
    x2⁺ = a2·x2 + c21·x1² + b2·u + d·u³
    """
    kind = PlantKind.TWO_STATE_POLYNOMIAL

    def __init__(self, a1: float = 0.5, a2: float = 0.4, c12: float = 0.1, c21: float = 0.05,
                 b1: float = 1.0, b2: float = 0.5, d: float = 0.1, **kwargs):
        super().__init__(n_x=2, **kwargs)
        self.a1, self.a2 = float(a1), float(a2)
        self.c12, self.c21 = float(c12), float(c21)
        self.b1, self.b2, self.d = float(b1), float(b2), float(d)

    def g(self, x: np.ndarray, u: float) -> np.ndarray:
        x1, x2 = float(x[0]), float(x[1])
        return np.array([
            self.a1 * x1 + self.c12 * x1 * x2 + self.b1 * u,
            self.a2 * x2 + self.c21 * x1 ** 2 + self.b2 * u + self.d * u ** 3,
        ])

    def g_many(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.asarray(u, dtype=float).reshape(-1)
        x1, x2 = x[:, 0], x[:, 1]
        return np.column_stack([
            self.a1 * x1 + self.c12 * x1 * x2 + self.b1 * u,
            self.a2 * x2 + self.c21 * x1 ** 2 + self.b2 * u + self.d * u ** 3,
        ])

    def parameters(self) -> Dict[str, Any]:
        return {"a1": self.a1, "a2": self.a2, "c12": self.c12, "c21": self.c21,
                "b1": self.b1, "b2": self.b2, "d": self.d}


class LinearPlant(PlantModel):
    """x⁺ = A·x + B·u"""
    kind = PlantKind.LINEAR

    def __init__(self, A: Sequence[Sequence[float]], B: Sequence[float], **kwargs):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float).reshape(-1)
        if A.shape[0] != A.shape[1] or A.shape[0] != B.size:
            raise ValueError(f"A must be square and match B, got A{A.shape} and B({B.size})")
        super().__init__(n_x=A.shape[0], **kwargs)
        self.A = A
        self.B = B

    def g(self, x: np.ndarray, u: float) -> np.ndarray:
        return self.A @ np.atleast_1d(x) + self.B * u

    def g_many(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.asarray(u, dtype=float).reshape(-1)
        return x @ self.A.T + np.outer(u, self.B)

    def parameters(self) -> Dict[str, Any]:
        return {"A": self.A.tolist(), "B": self.B.tolist()}


class ExpressionPlant(PlantModel):
    """
    Successor components given as expressions over x1..xn, u and named
    parameters, evaluated with pandas.eval
    """
    kind = PlantKind.EXPRESSION
    closed_form = False

    def __init__(self, expressions: Sequence[str], parameters: Optional[Dict[str, float]] = None, **kwargs):
        if not expressions:
            raise ValueError("Expression plant needs one expression per state component")
        super().__init__(n_x=len(expressions), **kwargs)
        self.expressions = [str(e) for e in expressions]
        self._parameters = {k: float(v) for k, v in (parameters or {}).items()}

    def _scope(self, x: np.ndarray, u) -> Dict[str, Any]:
        scope = dict(self._parameters)
        for i in range(self.n_x):
            scope[f"x{i + 1}"] = x[..., i]
        scope["u"] = u
        return scope

    def g(self, x: np.ndarray, u: float) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        scope = self._scope(x, float(u))
        return np.array([float(pd.eval(expr, local_dict=scope, engine="python")) for expr in self.expressions])

    def parameters(self) -> Dict[str, Any]:
        return {"expressions": list(self.expressions), **self._parameters}


def build_plant(config: Any, norm: Norm = Norm.LINF) -> PlantModel:
    """Plant from a plant config section"""
    kind = PlantKind(config.kind)
    common = dict(
        noise_bound=config.noise_bound,
        noise_law=NoiseLaw(config.noise_law),
        input_box=tuple(config.input_box),
        state_radius=config.state_radius,
        norm=norm,
    )
    params = dict(config.parameters)
    if kind is PlantKind.SCALAR_TANH:
        return ScalarTanhPlant(**params, **common)
    if kind is PlantKind.TWO_STATE_POLYNOMIAL:
        return TwoStatePolynomialPlant(**params, **common)
    if kind is PlantKind.LINEAR:
        return LinearPlant(A=params["A"], B=params["B"], **common)
    return ExpressionPlant(config.expressions, parameters=params, **common)


def plant_step(p: PlantModel, x, u: float, rng: np.random.Generator) -> np.ndarray:
    return p.step(x, u, rng)


class ExcitationKind(Enum):
    UNIFORM_RANDOM = "uniform_random"
    GRID_SWEEP = "grid_sweep"
    MULTILEVEL = "multilevel"


@dataclass
class ExcitationPolicy:
    """How the open-loop training experiment drives the plant"""
    kind: ExcitationKind = ExcitationKind.UNIFORM_RANDOM
    length: int = 1000
    seed: int = 0
    grid_x: int = 20
    grid_u: int = 20
    levels: int = 5
    hold: int = 5
    max_attempts_factor: int = 100

    def __post_init__(self):
        self.kind = ExcitationKind(self.kind)
        if self.length < 1:
            raise ValueError(f"Excitation length must be at least 1, got {self.length}")


def grid_states(plant: PlantModel, points: int) -> np.ndarray:
    axis = np.linspace(-plant.state_radius, plant.state_radius, points)
    if plant.norm is Norm.L2:
        mesh = np.stack(np.meshgrid(*([axis] * plant.n_x), indexing="ij"), axis=-1).reshape(-1, plant.n_x)
        return mesh[np.linalg.norm(mesh, axis=1) <= plant.state_radius]
    return np.stack(np.meshgrid(*([axis] * plant.n_x), indexing="ij"), axis=-1).reshape(-1, plant.n_x)


def grid_cells(plant: PlantModel, policy: ExcitationPolicy) -> Tuple[np.ndarray, np.ndarray]:
    """(states, inputs) of every U × X grid cell, state-major order"""
    states = grid_states(plant, policy.grid_x)
    inputs = np.linspace(plant.input_box[0], plant.input_box[1], policy.grid_u)
    return np.repeat(states, len(inputs), axis=0), np.tile(inputs, len(states))


def _random_state(plant: PlantModel, rng: np.random.Generator) -> np.ndarray:
    return sample_ball(rng, 1, plant.n_x, plant.state_radius, plant.norm)[0]


def generate_training_data(plant: PlantModel, policy: ExcitationPolicy) -> Tuple[TrainingData, Dict[str, Any]]:
    """
    Open-loop experiment producing D_N with time indexes −N..−1.

    Pairs whose successor leaves X are discarded and the state is re-drawn
    uniformly in X, so no stored pair spans a reset.
    """
    rng = np.random.default_rng(policy.seed)
    N = policy.length
    xs: List[np.ndarray] = []
    us: List[float] = []
    nexts: List[np.ndarray] = []
    resets: List[int] = []
    discarded = 0

    if policy.kind is ExcitationKind.GRID_SWEEP:
        cell_x, cell_u = grid_cells(plant, policy)
        attempts = 0
        while len(us) < N:
            if attempts >= policy.max_attempts_factor * N:
                raise ValueError("Grid sweep keeps leaving the state box; enlarge X or shrink U")
            i = attempts % len(cell_u)
            attempts += 1
            x_next = plant.step(cell_x[i], cell_u[i], rng, warn=False)
            if not plant.in_state_box(x_next):
                discarded += 1
                continue
            xs.append(cell_x[i])
            us.append(float(cell_u[i]))
            nexts.append(x_next)
    else:
        x = _random_state(plant, rng)
        lo_u, hi_u = plant.input_box
        levels = np.linspace(lo_u, hi_u, policy.levels)
        level = float(rng.choice(levels))
        step_index = 0
        attempts = 0
        while len(us) < N:
            if attempts >= policy.max_attempts_factor * N:
                raise ValueError("Excitation keeps leaving the state box; enlarge X or shrink U")
            attempts += 1
            if policy.kind is ExcitationKind.MULTILEVEL:
                if step_index and step_index % policy.hold == 0:
                    level = float(rng.choice(levels))
                u = level
            else:
                u = float(rng.uniform(lo_u, hi_u))
            step_index += 1
            x_next = plant.step(x, u, rng, warn=False)
            if not plant.in_state_box(x_next):
                discarded += 1
                resets.append(len(us) - N)
                logger.warning(f"Rollout left X at row {len(us) - N}; state reset")
                x = _random_state(plant, rng)
                continue
            xs.append(x)
            us.append(u)
            nexts.append(x_next)
            x = x_next

    data = TrainingData(
        t=np.arange(-N, 0),
        u=np.asarray(us),
        x=np.vstack(xs),
        x_next=np.vstack(nexts),
    )
    metadata = {
        "plant": plant.describe(),
        "excitation": {
            "kind": policy.kind.value,
            "length": N,
            "seed": policy.seed,
            "grid_x": policy.grid_x,
            "grid_u": policy.grid_u,
            "levels": policy.levels,
            "hold": policy.hold,
        },
        "rows": N,
        "resets": resets,
        "discarded_pairs": discarded,
    }
    logger.info(f"Generated {N} training rows ({discarded} pairs discarded, {len(resets)} resets)")
    return data, metadata


class ReferenceKind(Enum):
    CONSTANT = "constant"
    PIECEWISE = "piecewise"
    SINUSOID = "sinusoid"


@dataclass
class ReferenceSignal:
    """r_t, always clamped to B_r̄"""
    kind: ReferenceKind
    n_x: int
    r_bar: float
    value: List[float] = field(default_factory=list)
    segments: List[Tuple[int, List[float]]] = field(default_factory=list)
    amplitude: List[float] = field(default_factory=list)
    offset: List[float] = field(default_factory=list)
    period: float = 100.0
    phase: float = 0.0
    norm: Norm = Norm.LINF

    def __post_init__(self):
        self.kind = ReferenceKind(self.kind)
        self.norm = Norm(self.norm)
        if self.period <= 0:
            raise ValueError(f"Reference period must be positive, got {self.period}")
        self.segments = sorted(((int(t), list(v)) for t, v in self.segments), key=lambda s: s[0])

    def _vector(self, values: Sequence[float], name: str) -> np.ndarray:
        if not values:
            return np.zeros(self.n_x)
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.size == 1:
            return np.full(self.n_x, float(v[0]))
        if v.size != self.n_x:
            raise ValueError(f"Reference {name} has {v.size} components, the plant has {self.n_x}")
        return v

    def raw(self, t: int) -> np.ndarray:
        if self.kind is ReferenceKind.CONSTANT:
            return self._vector(self.value, "value")
        if self.kind is ReferenceKind.PIECEWISE:
            current = self._vector(self.value, "value")
            for start, values in self.segments:
                if t >= start:
                    current = self._vector(values, "segment")
            return current
        offset = self._vector(self.offset, "offset")
        amplitude = self._vector(self.amplitude, "amplitude")
        return offset + amplitude * np.sin(2.0 * np.pi * t / self.period + self.phase)

    def __call__(self, t: int) -> np.ndarray:
        r = self.raw(t)
        r_norm = vector_norm(r, self.norm)
        if r_norm <= self.r_bar:
            return r
        if self.norm is Norm.LINF:
            return np.clip(r, -self.r_bar, self.r_bar)
        return r * (self.r_bar / r_norm)
