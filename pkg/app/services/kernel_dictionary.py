"""
Kernel dictionary service
Gaussian RBF evaluation, coherence and sparsity-controlled growth of the center set
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)


class KernelKind(Enum):
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and length scale"""
    kind: KernelKind = KernelKind.GAUSSIAN
    width: float = 1.0

    def __post_init__(self):
        if not isinstance(self.kind, KernelKind):
            object.__setattr__(self, "kind", KernelKind(self.kind))
        if not np.isfinite(self.width) or self.width <= 0:
            raise ValueError(f"Kernel width must be positive, got {self.width}")

    @property
    def gamma(self) -> float:
        """Coefficient of the squared distance in the exponent"""
        return 1.0 / (2.0 * self.width ** 2)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "width": float(self.width)}


def make_regressor(state: Sequence[float], successor: Sequence[float]) -> np.ndarray:
    """Stack a state with its successor (training) or its reference (operation)"""
    state = np.atleast_1d(np.asarray(state, dtype=float))
    successor = np.atleast_1d(np.asarray(successor, dtype=float))
    if state.shape != successor.shape:
        raise ValueError(
            f"State and successor dimensions differ: {state.shape} vs {successor.shape}"
        )
    return as_regressor(np.concatenate([state, successor]))


def as_regressor(coords: Sequence[float]) -> np.ndarray:
    omega = np.asarray(coords, dtype=float).reshape(-1)
    if omega.size == 0 or omega.size % 2:
        raise ValueError(f"Regressor length must be a positive even number, got {omega.size}")
    if not np.all(np.isfinite(omega)):
        raise ValueError("Regressor entries must be finite")
    return omega


def kernel_eval(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"Kernel arguments differ in dimension: {a.size} vs {b.size}")
    diff = a - b
    return float(np.exp(-spec.gamma * float(diff @ diff)))


def kernel_matrix(spec: KernelSpec, points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Kernel values between every row of `points` and every row of `centers`"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if centers.shape[0] == 0 or centers.size == 0:
        return np.zeros((points.shape[0], 0))
    if points.shape[1] != centers.shape[1]:
        raise ValueError(
            f"Regressor dimension {points.shape[1]} does not match dictionary dimension {centers.shape[1]}"
        )
    return np.exp(-spec.gamma * cdist(points, centers, "sqeuclidean"))


@dataclass(frozen=True, eq=False)
class Dictionary:
    """
    Ordered set of kernel centers W_t.
    Values are immutable; `maybe_add_center` returns a new dictionary.
    """
    threshold: float
    spec: KernelSpec = field(default_factory=KernelSpec)
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"Coherence threshold must lie in (0, 1), got {self.threshold}")
        centers = np.array(self.centers, dtype=float)
        if centers.size == 0:
            centers = np.zeros((0, centers.shape[1] if centers.ndim == 2 else 0))
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)

    @property
    def size(self) -> int:
        return int(self.centers.shape[0])

    def __len__(self) -> int:
        return self.size

    def kernel_vector(self, omega: np.ndarray) -> np.ndarray:
        return kernel_vector(self.spec, omega, self)

    def coherence(self, omega: np.ndarray) -> float:
        return coherence(self.spec, omega, self)


def kernel_vector(spec: KernelSpec, omega: np.ndarray, dictionary: Dictionary) -> np.ndarray:
    """K(ω, W_t), ordered like the stored centers"""
    if dictionary.size == 0:
        return np.zeros(0)
    return kernel_matrix(spec, omega, dictionary.centers)[0]


def coherence(spec: KernelSpec, omega: np.ndarray, dictionary: Dictionary) -> float:
    # empty dictionary: 0, so the first regressor is always admitted
    if dictionary.size == 0:
        return 0.0
    return float(np.max(np.abs(kernel_vector(spec, omega, dictionary))))


def maybe_add_center(dictionary: Dictionary, omega: np.ndarray) -> Tuple[Dictionary, bool]:
    """Append ω when its coherence with the current centers is at most μ̄"""
    omega = as_regressor(omega)
    if dictionary.size and dictionary.centers.shape[1] != omega.size:
        raise ValueError(
            f"Regressor dimension {omega.size} does not match dictionary dimension {dictionary.centers.shape[1]}"
        )
    if coherence(dictionary.spec, omega, dictionary) > dictionary.threshold:
        return dictionary, False

    if dictionary.size:
        centers = np.vstack([dictionary.centers, omega[np.newaxis, :]])
    else:
        centers = omega[np.newaxis, :].copy()
    logger.debug(f"Dictionary grew to {centers.shape[0]} centers")
    return Dictionary(threshold=dictionary.threshold, spec=dictionary.spec, centers=centers), True
