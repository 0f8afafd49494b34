"""
Set-membership service
Lipschitz interpolation bounds on the optimal inverse, their inflated and
time-varying variants, the D0 gap estimate and the training-data CSV codec
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

# queries evaluated per distance block, keeps cdist blocks around a few MB
_QUERY_BLOCK = 256


class Norm(Enum):
    L2 = "l2"
    LINF = "linf"

    @property
    def metric(self) -> str:
        return "euclidean" if self is Norm.L2 else "chebyshev"


class TrainingDataError(ValueError):
    """Malformed or inconsistent training data"""


def vector_norm(v: np.ndarray, norm: Norm) -> float:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size == 0:
        return 0.0
    return float(np.linalg.norm(v, ord=2 if norm is Norm.L2 else np.inf))


def row_norms(values: np.ndarray, norm: Norm) -> np.ndarray:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return np.linalg.norm(values, ord=2 if norm is Norm.L2 else np.inf, axis=1)


def pairwise_distance(a: np.ndarray, b: np.ndarray, norm: Norm) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"Dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return cdist(a, b, norm.metric)


def max_pairwise_distance(points: np.ndarray, norm: Norm) -> float:
    """Diameter of a point set, evaluated block by block"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] < 2:
        return 0.0
    if norm is Norm.LINF:
        return float(np.max(points.max(axis=0) - points.min(axis=0)))
    best = 0.0
    for start in range(0, points.shape[0], 1024):
        block = points[start:start + 1024]
        best = max(best, float(cdist(block, points, "euclidean").max()))
    return best


@dataclass(frozen=True)
class DataPoint:
    """One measured (input, regressor) pair"""
    u: float
    omega: np.ndarray
    t: int


class TrainingData:
    """
    Frozen training set D_N.
    Rows are ordered by time; each row carries x_t, u_t and x_{t+1}.
    """

    def __init__(self, t: Sequence[int], u: Sequence[float],
                 x: np.ndarray, x_next: np.ndarray):
        self.t = np.asarray(t, dtype=int).reshape(-1)
        self.u = np.asarray(u, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float)
        x_next = np.asarray(x_next, dtype=float)
        self.x = x.reshape(len(self.u), -1)
        self.x_next = x_next.reshape(len(self.u), -1)
        if len(self.u) == 0:
            raise TrainingDataError("Training data is empty")
        if not (len(self.t) == len(self.u) == self.x.shape[0] == self.x_next.shape[0]):
            raise TrainingDataError("Training columns have inconsistent lengths")
        if self.x.shape[1] != self.x_next.shape[1]:
            raise TrainingDataError("State and successor blocks differ in width")
        if np.any(np.diff(self.t) <= 0):
            bad = int(np.argmax(np.diff(self.t) <= 0)) + 1
            raise TrainingDataError(f"Row {bad}: time index {self.t[bad]} is not strictly increasing")
        self.omega = np.hstack([self.x, self.x_next])
        for arr in (self.t, self.u, self.x, self.x_next, self.omega):
            arr.setflags(write=False)

    @property
    def n_x(self) -> int:
        return int(self.x.shape[1])

    def __len__(self) -> int:
        return int(self.u.shape[0])

    def data_points(self) -> List[DataPoint]:
        return [DataPoint(u=float(self.u[i]), omega=self.omega[i], t=int(self.t[i]))
                for i in range(len(self))]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.t, "u": self.u})
        for i in range(self.n_x):
            frame[f"x_{i + 1}"] = self.x[:, i]
        for i in range(self.n_x):
            frame[f"x_next_{i + 1}"] = self.x_next[:, i]
        return frame


def write_training_csv(data: TrainingData, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data.to_frame().to_csv(path, index=False, float_format="%.17g")
    return path


def read_training_csv(path: Union[str, Path]) -> TrainingData:
    """Parse a training CSV (t, u, x_1..x_n, x_next_1..x_next_n)"""
    path = Path(path)
    if not path.exists():
        raise TrainingDataError(f"Training data file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise TrainingDataError(f"Could not parse {path}: {e}") from e

    columns = list(frame.columns)
    if len(columns) < 4 or columns[:2] != ["t", "u"]:
        raise TrainingDataError(f"Header must start with 't,u', got {columns[:2]}")
    n_x = (len(columns) - 2) // 2
    expected = ["t", "u"] + [f"x_{i + 1}" for i in range(n_x)] + [f"x_next_{i + 1}" for i in range(n_x)]
    if columns != expected:
        raise TrainingDataError(f"Unexpected header {columns}, expected {expected}")
    if frame.empty:
        raise TrainingDataError(f"{path} has a header but no rows")

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad_rows = numeric.isna().any(axis=1) | ~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    if bad_rows.any():
        row = int(np.flatnonzero(bad_rows.to_numpy())[0])
        raise TrainingDataError(f"Row {row + 1}: non-numeric or non-finite value {frame.iloc[row].tolist()}")
    if not (numeric["t"] == numeric["t"].round()).all():
        row = int(np.flatnonzero((numeric["t"] != numeric["t"].round()).to_numpy())[0])
        raise TrainingDataError(f"Row {row + 1}: time index must be an integer")

    return TrainingData(
        t=numeric["t"].astype(int).to_numpy(),
        u=numeric["u"].to_numpy(dtype=float),
        x=numeric[expected[2:2 + n_x]].to_numpy(dtype=float),
        x_next=numeric[expected[2 + n_x:]].to_numpy(dtype=float),
    )


class BoundsOracle:
    """
    Upper and lower bounds on every inverse consistent with the data:
    f̄(ω) = min_k u_k + δ + γ‖ω − ω_k‖ and f(ω) = max_k u_k − δ − γ‖ω − ω_k‖
    """

    def __init__(self, data: TrainingData, delta: float, gamma: float, norm: Norm = Norm.LINF):
        if data is None or len(data) == 0:
            raise ValueError("Bounds oracle needs at least one data point")
        if delta < 0 or gamma < 0:
            raise ValueError(f"delta and gamma must be nonnegative, got {delta}, {gamma}")
        self.data = data
        self.delta = float(delta)
        self.gamma = float(gamma)
        self.norm = Norm(norm)

    def bounds_many(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(lower, upper) for each row of `queries`"""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        lower = np.empty(queries.shape[0])
        upper = np.empty(queries.shape[0])
        u = self.data.u[np.newaxis, :]
        for start in range(0, queries.shape[0], _QUERY_BLOCK):
            block = queries[start:start + _QUERY_BLOCK]
            dist = pairwise_distance(block, self.data.omega, self.norm)
            upper[start:start + len(block)] = np.min(u + self.delta + self.gamma * dist, axis=1)
            lower[start:start + len(block)] = np.max(u - self.delta - self.gamma * dist, axis=1)
        return lower, upper

    def bounds(self, omega: np.ndarray) -> Tuple[float, float]:
        lower, upper = self.bounds_many(np.asarray(omega, dtype=float).reshape(1, -1))
        return float(lower[0]), float(upper[0])

    def upper_bound(self, omega: np.ndarray) -> float:
        return self.bounds(omega)[1]

    def lower_bound(self, omega: np.ndarray) -> float:
        return self.bounds(omega)[0]

    def gap_many(self, queries: np.ndarray) -> np.ndarray:
        lower, upper = self.bounds_many(queries)
        return upper - lower


def upper_bound(oracle: BoundsOracle, omega: np.ndarray) -> float:
    return oracle.upper_bound(omega)


def lower_bound(oracle: BoundsOracle, omega: np.ndarray) -> float:
    return oracle.lower_bound(omega)


def inflated_bounds(data: TrainingData, delta_hat: float, c_delta: float,
                    gamma_hat: float, c_gamma: float, omega: np.ndarray,
                    norm: Norm = Norm.LINF) -> Tuple[float, float]:
    """Bounds built from the training estimates plus the designer's inflations"""
    if c_delta < 0 or c_gamma < 0:
        raise ValueError("Inflation constants must be nonnegative")
    return BoundsOracle(data, delta_hat + c_delta, gamma_hat + c_gamma, norm).bounds(omega)


def timevarying_gamma(gamma_hat_t: float, gamma_hat_train: float, c_gamma: float) -> float:
    return min(gamma_hat_t + c_gamma, gamma_hat_train + c_gamma)


def timevarying_bounds(data: TrainingData, delta_hat_train: float, c_delta: float,
                       gamma_hat_t: float, gamma_hat_train: float, c_gamma: float,
                       omega: np.ndarray, norm: Norm = Norm.LINF) -> Tuple[float, float]:
    """Bounds whose slope follows the current Lipschitz estimate, capped by the training one"""
    if c_delta < 0 or c_gamma < 0:
        raise ValueError("Inflation constants must be nonnegative")
    gamma = max(timevarying_gamma(gamma_hat_t, gamma_hat_train, c_gamma), 0.0)
    return BoundsOracle(data, delta_hat_train + c_delta, gamma, norm).bounds(omega)


def sample_ball(rng: np.random.Generator, count: int, dim: int, radius: float, norm: Norm,
                radial_rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Uniform samples in the norm ball of the given radius"""
    if count <= 0:
        return np.zeros((0, dim))
    if norm is Norm.LINF:
        return rng.uniform(-radius, radius, size=(count, dim))
    radial_rng = rng if radial_rng is None else radial_rng
    direction = rng.standard_normal(size=(count, dim))
    lengths = np.linalg.norm(direction, axis=1, keepdims=True)
    lengths[lengths == 0] = 1.0
    scale = radial_rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / dim)
    return radius * scale * direction / lengths


def _sample_streams(seed) -> List[np.random.Generator]:
    # one stream per block and per draw kind keeps sample sets nested when `samples` grows
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(4)]


def sup_candidates(oracle: BoundsOracle, x_bar: float, r_bar: float, samples: int,
                   seed=0, x_cap: Optional[float] = None) -> np.ndarray:
    """
    Query points for the sup over B_x̄ × B_r̄: seeded draws plus the training
    regressors lying inside the set. With `x_cap` the state block is drawn from
    B_{x_cap} and filtered, so the candidate set only grows with x̄.
    """
    if x_bar < 0 or r_bar < 0:
        raise ValueError(f"Ball radii must be nonnegative, got x_bar={x_bar}, r_bar={r_bar}")
    if samples < 1:
        raise ValueError(f"samples must be at least 1, got {samples}")
    n_x = oracle.data.n_x
    norm = oracle.norm
    outer = x_bar if x_cap is None else max(float(x_cap), x_bar)

    x_dir, x_rad, r_dir, r_rad = _sample_streams(seed)
    xs = sample_ball(x_dir, samples, n_x, outer, norm, radial_rng=x_rad)
    rs = sample_ball(r_dir, samples, n_x, r_bar, norm, radial_rng=r_rad)
    if x_cap is not None:
        keep = row_norms(xs, norm) <= x_bar
        xs, rs = xs[keep], rs[keep]
    drawn = np.hstack([xs, rs])

    data = oracle.data
    inside = (row_norms(data.x, norm) <= x_bar) & (row_norms(data.x_next, norm) <= r_bar)
    anchors = data.omega[inside]
    origin = np.zeros((1, 2 * n_x))
    return np.vstack([drawn, anchors, origin])


def estimate_D0(oracle: BoundsOracle, x_bar: float, r_bar: float, samples: int,
                seed=0, x_cap: Optional[float] = None) -> float:
    """Seeded Monte-Carlo estimate of sup (f̄ − f) over B_x̄ × B_r̄"""
    candidates = sup_candidates(oracle, x_bar, r_bar, samples, seed=seed, x_cap=x_cap)
    gap = float(np.max(oracle.gap_many(candidates)))
    logger.debug(f"D0 estimate {gap:.6g} over {len(candidates)} points (x_bar={x_bar:.4g}, r_bar={r_bar:.4g})")
    return gap
