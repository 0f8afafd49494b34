"""
Projection learning service
Hyperslab construction, Euclidean projections, weight extension and the
averaged-projection (APSM) weight update
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.services.kernel_dictionary import Dictionary, kernel_matrix
from app.services.set_membership import DataPoint, Norm, vector_norm

logger = logging.getLogger(__name__)

# absolute tolerance on aᵀk when deciding slab membership
MEMBERSHIP_TOL = 1e-9


class SlabEmptyError(ValueError):
    """Projection requested onto a slab with lo > hi"""

    def __init__(self, message: str, t: Optional[int] = None):
        super().__init__(message)
        self.t = t


class InfeasibleProjectionError(ValueError):
    """Zero direction vector with the point outside the slab"""


@dataclass(frozen=True, eq=False)
class Slab:
    """{a : lo ≤ aᵀk ≤ hi}"""
    k: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        k = np.array(self.k, dtype=float).reshape(-1)
        if not np.all(np.isfinite(k)):
            raise ValueError("Slab direction must be finite")
        k.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))

    @property
    def is_empty(self) -> bool:
        return self.lo > self.hi

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def value(self, a: np.ndarray) -> float:
        return float(np.dot(np.asarray(a, dtype=float), self.k))

    def contains(self, a: np.ndarray, tol: float = MEMBERSHIP_TOL) -> bool:
        v = self.value(a)
        return self.lo - tol <= v <= self.hi + tol

    def midpoint_hyperplane(self) -> "Slab":
        mid = 0.5 * (self.lo + self.hi)
        return Slab(self.k, mid, mid)


def extend_weights(a: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad the weights for centers added since the last step"""
    a = np.asarray(a, dtype=float).reshape(-1)
    if size < a.size:
        raise ValueError(f"Cannot shrink weights from {a.size} to {size}; the dictionary never shrinks")
    if size == a.size:
        return a.copy()
    return np.concatenate([a, np.zeros(size - a.size)])


def build_measurement_slab(dp: DataPoint, dictionary: Dictionary, delta_eff: float) -> Slab:
    if delta_eff < 0:
        raise ValueError(f"delta_eff must be nonnegative, got {delta_eff}")
    k = dictionary.kernel_vector(dp.omega)
    return Slab(k, dp.u - delta_eff, dp.u + delta_eff)


def build_measurement_slabs(points: Sequence[DataPoint], dictionary: Dictionary,
                            delta_eff: float) -> List[Tuple[int, Slab]]:
    """Slabs for a batch of measurements, one kernel-matrix evaluation"""
    if delta_eff < 0:
        raise ValueError(f"delta_eff must be nonnegative, got {delta_eff}")
    if not points:
        return []
    omegas = np.vstack([dp.omega for dp in points])
    K = kernel_matrix(dictionary.spec, omegas, dictionary.centers)
    return [(dp.t, Slab(K[i], dp.u - delta_eff, dp.u + delta_eff)) for i, dp in enumerate(points)]


def build_stability_slab(omega_plus: np.ndarray, x_t: np.ndarray, gamma_delta_t: float,
                         sigma: float, bounds: Tuple[float, float], dictionary: Dictionary,
                         norm: Norm = Norm.LINF) -> Slab:
    """
    Robust stability strip at ω⁺_t.
    `bounds` is (lower, upper) of the inverse at ω⁺_t; the slab may come out
    empty, which callers read from `Slab.is_empty`.
    """
    if gamma_delta_t < 0 or sigma < 0:
        raise ValueError(f"gamma_delta_t and sigma must be nonnegative, got {gamma_delta_t}, {sigma}")
    lo_f, hi_f = bounds
    margin = gamma_delta_t * vector_norm(x_t, norm) + sigma
    slab = Slab(dictionary.kernel_vector(omega_plus), hi_f - margin, lo_f + margin)
    if slab.is_empty:
        logger.debug(f"Stability slab empty: lo={slab.lo:.6g} > hi={slab.hi:.6g}")
    return slab


def project_onto_slab(a: np.ndarray, s: Slab) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape != s.k.shape:
        raise ValueError(f"Weight dimension {a.size} does not match slab dimension {s.k.size}")
    if s.is_empty:
        raise SlabEmptyError(f"Cannot project onto an empty slab (lo={s.lo:.6g} > hi={s.hi:.6g})")

    v = float(a @ s.k)
    if s.lo <= v <= s.hi:
        return a.copy()
    kk = float(s.k @ s.k)
    if kk == 0.0:
        raise InfeasibleProjectionError(
            f"Slab direction is zero and aᵀk = {v:.6g} lies outside [{s.lo:.6g}, {s.hi:.6g}]"
        )
    target = s.hi if v > s.hi else s.lo
    return a - ((v - target) / kk) * s.k


def apsm_update(a_plus: np.ndarray, recent_slabs: Iterable[Tuple[int, Slab]], stability: Slab,
                tol: float = MEMBERSHIP_TOL) -> np.ndarray:
    """
    Average the projections onto the violated recent slabs, then project onto
    the stability slab. The result always satisfies the stability slab.
    """
    a_plus = np.asarray(a_plus, dtype=float).reshape(-1)
    slabs = [s for _, s in recent_slabs]
    if stability.is_empty:
        raise SlabEmptyError(
            f"Stability slab is empty (lo={stability.lo:.6g} > hi={stability.hi:.6g})"
        )

    point = a_plus
    if slabs:
        K = np.vstack([s.k for s in slabs])
        if K.shape[1] != a_plus.size:
            raise ValueError(f"Weight dimension {a_plus.size} does not match slab dimension {K.shape[1]}")
        lo = np.array([s.lo for s in slabs])
        hi = np.array([s.hi for s in slabs])
        v = K @ a_plus
        violated = (v < lo - tol) | (v > hi + tol)
        if np.any(violated):
            if np.any(lo[violated] > hi[violated]):
                raise SlabEmptyError("A violated measurement slab is empty")
            kk = np.einsum("ij,ij->i", K[violated], K[violated])
            if np.any(kk == 0.0):
                raise InfeasibleProjectionError("Violated measurement slab has a zero direction")
            target = np.clip(v[violated], lo[violated], hi[violated])
            steps = ((target - v[violated]) / kk)[:, np.newaxis] * K[violated]
            point = a_plus + steps.mean(axis=0)

    return project_onto_slab(point, stability)
