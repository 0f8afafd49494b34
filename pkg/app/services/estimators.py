"""
Online estimators for noise bounds and Lipschitz constants
Sliding-window noise-bound and Lipschitz-constant estimation, the estimator
bundle the adaptive controller carries, and the offline batch counterparts
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from app.services.set_membership import (
    Norm,
    TrainingData,
    max_pairwise_distance,
    pairwise_distance,
    row_norms,
)

logger = logging.getLogger(__name__)

# relative size of the neighbourhood radius against the data diameter
RHO_FRACTION = 0.01
# used when every training ξ coincides
RHO_FLOOR = 1e-9

_PAIR_BLOCK = 512


def _as_row(v) -> np.ndarray:
    v = np.atleast_1d(np.asarray(v, dtype=float)).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("Estimator inputs must be finite")
    return v


def default_rho(xi: np.ndarray, norm: Norm = Norm.LINF) -> float:
    """0.01 of the largest pairwise distance between the training ξ"""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, np.newaxis]
    rho = RHO_FRACTION * max_pairwise_distance(xi, norm)
    return rho if rho > 0 else RHO_FLOOR


class NoiseEstimatorState:
    """
    Noise-bound estimate ε̂_t over a window of the last N̄ (ξ, z) pairs.
    ε̂_t never decreases.
    """

    def __init__(self, capacity: int, rho: float, norm: Norm = Norm.LINF, eps_hat: float = 0.0):
        if capacity < 1:
            raise ValueError(f"Window capacity must be at least 1, got {capacity}")
        if not rho > 0:
            raise ValueError(f"rho must be positive, got {rho}")
        self.capacity = int(capacity)
        self.rho = float(rho)
        self.norm = Norm(norm)
        self.eps_hat = float(eps_hat)
        self.last_eps_z = 0.0
        self._xi: Optional[np.ndarray] = None
        self._z: Optional[np.ndarray] = None
        self._count = 0
        self._next = 0

    @property
    def window_size(self) -> int:
        return self._count

    def update(self, xi, z) -> "NoiseEstimatorState":
        xi = _as_row(xi)
        z = _as_row(z)
        if self._xi is None:
            self._xi = np.zeros((self.capacity, xi.size))
            self._z = np.zeros((self.capacity, z.size))
        elif xi.size != self._xi.shape[1] or z.size != self._z.shape[1]:
            raise ValueError(
                f"Dimension mismatch: got ξ of {xi.size} and z of {z.size}, "
                f"window holds {self._xi.shape[1]} and {self._z.shape[1]}"
            )

        eps_z = 0.0
        if self._count:
            stored_xi = self._xi[:self._count]
            near = pairwise_distance(stored_xi, xi, self.norm)[:, 0] <= self.rho
            if np.any(near):
                eps_z = 0.5 * float(np.max(row_norms(self._z[:self._count][near] - z, self.norm)))
        self.last_eps_z = eps_z
        self.eps_hat = max(self.eps_hat, eps_z)

        self._xi[self._next] = xi
        self._z[self._next] = z
        self._next = (self._next + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)
        return self


class LipschitzEstimatorState:
    """
    Lipschitz-constant estimate γ̂_t over the last N̄ points plus the current one.

    Pair slopes live in a symmetric slot matrix (NaN for unused slots) so that
    eviction is a row/column reset rather than a copy.
    """

    def __init__(self, capacity: int, norm: Norm = Norm.LINF):
        if capacity < 1:
            raise ValueError(f"Window capacity must be at least 1, got {capacity}")
        self.capacity = int(capacity)
        self.norm = Norm(norm)
        self.gamma_hat = 0.0
        self.gamma_current = 0.0
        self.delta_current = 0.0
        self._slots = self.capacity + 1
        self._xi: Optional[np.ndarray] = None
        self._z: Optional[np.ndarray] = None
        self._times = np.full(0, -1, dtype=np.int64)
        self._slopes = np.zeros((0, 0))
        self._dists = np.zeros((0, 0))
        self._count = 0
        self._next = 0
        self._clock = 0

    @property
    def window_size(self) -> int:
        return self._count

    def _allocate(self, xi_dim: int, z_dim: int, size: int):
        # grow by doubling so a large N̄ does not allocate its whole table up front
        old = self._xi.shape[0] if self._xi is not None else 0
        xi = np.zeros((size, xi_dim))
        z = np.zeros((size, z_dim))
        times = np.full(size, -1, dtype=np.int64)
        slopes = np.full((size, size), np.nan)
        dists = np.full((size, size), np.nan)
        if old:
            xi[:old] = self._xi
            z[:old] = self._z
            times[:old] = self._times
            slopes[:old, :old] = self._slopes
            dists[:old, :old] = self._dists
        self._xi, self._z, self._times = xi, z, times
        self._slopes, self._dists = slopes, dists

    def _slot_for_next_point(self) -> int:
        if self._count < self._slots:
            slot = self._count
            if self._xi.shape[0] <= slot:
                self._allocate(self._xi.shape[1], self._z.shape[1],
                               min(self._slots, max(2 * self._xi.shape[0], 64)))
            return slot
        # full: evict the oldest point
        slot = int(np.argmin(self._times))
        self._slopes[slot, :] = np.nan
        self._slopes[:, slot] = np.nan
        self._dists[slot, :] = np.nan
        self._dists[:, slot] = np.nan
        return slot

    def table_max(self) -> Tuple[float, Optional[Tuple[int, int]]]:
        """Largest stored pair slope and its (earlier, later) slots, ties to the earliest pair"""
        if self._count < 2:
            return -np.inf, None
        best = np.nanmax(self._slopes)
        rows, cols = np.nonzero(self._slopes == best)
        t_rows = self._times[rows]
        t_cols = self._times[cols]
        first = np.minimum(t_rows, t_cols)
        second = np.maximum(t_rows, t_cols)
        pick = int(np.lexsort((second, first))[0])
        return float(best), (int(rows[pick]), int(cols[pick]))

    def update(self, xi, z, eps_hat_t: float, eps_hat_prev: float) -> "LipschitzEstimatorState":
        xi = _as_row(xi)
        z = _as_row(z)
        if eps_hat_t < eps_hat_prev or eps_hat_prev < 0:
            raise ValueError(f"Noise estimates must satisfy eps_hat_t ≥ eps_hat_prev ≥ 0, got {eps_hat_t}, {eps_hat_prev}")
        if self._xi is None:
            self._allocate(xi.size, z.size, min(self._slots, 64))
        elif xi.size != self._xi.shape[1] or z.size != self._z.shape[1]:
            raise ValueError(
                f"Dimension mismatch: got ξ of {xi.size} and z of {z.size}, "
                f"window holds {self._xi.shape[1]} and {self._z.shape[1]}"
            )

        slot = self._slot_for_next_point()

        # corrections for the noise-estimate increase, stored pairs first
        d_eps = eps_hat_t - eps_hat_prev
        if d_eps > 0:
            moving = self._dists > 0
            self._slopes[moving] -= 2.0 * d_eps / self._dists[moving]
            if self.delta_current > 0:
                self.gamma_current -= 2.0 * d_eps / self.delta_current

        # new-pair slopes against every stored point
        occupied = np.flatnonzero(self._times >= 0)
        occupied = occupied[occupied != slot]
        if occupied.size:
            dist = pairwise_distance(self._xi[occupied], xi, self.norm)[:, 0]
            dz = row_norms(self._z[occupied] - z, self.norm)
            numerator = dz - 2.0 * eps_hat_t
            slopes = np.zeros(occupied.size)
            ok = (dist > 0) & (numerator > 0)
            slopes[ok] = numerator[ok] / dist[ok]
            self._slopes[occupied, slot] = slopes
            self._slopes[slot, occupied] = slopes
            self._dists[occupied, slot] = dist
            self._dists[slot, occupied] = dist

        self._xi[slot] = xi
        self._z[slot] = z
        self._times[slot] = self._clock
        self._clock += 1
        self._count = min(self._count + 1, self._slots)

        table_best, pair = self.table_max()
        if pair is not None and table_best >= self.gamma_current:
            self.gamma_hat = table_best
            self.delta_current = float(self._dists[pair])
        else:
            self.gamma_hat = self.gamma_current
        self.gamma_hat = max(self.gamma_hat, 0.0)
        self.gamma_current = self.gamma_hat
        return self


def noise_bound_update(state: NoiseEstimatorState, xi, z) -> NoiseEstimatorState:
    return state.update(xi, z)


def lipschitz_update(state: LipschitzEstimatorState, xi, z, eps_hat_t: float,
                     eps_hat_prev: float) -> LipschitzEstimatorState:
    return state.update(xi, z, eps_hat_t, eps_hat_prev)


@dataclass
class EstimatorSnapshot:
    """Estimates recorded at the end of the training pass"""
    delta_hat: float
    zeta_hat: float
    epsilon_hat: float
    gamma_star_hat: float
    gamma_g_hat: float
    samples: int

    def to_dict(self) -> dict:
        return asdict(self)


class EstimatorBundle:
    """
    The estimators run side by side:
    δ over (ω, u), ζ over (u, x⁺), ε over ((x, u), x⁺) and the two Lipschitz
    estimators γ* over (ω, u) and γ_g over (u, x⁺).
    """

    def __init__(self, N_bar: int, rho_delta: float, rho_zeta: float, rho_epsilon: float,
                 norm: Norm = Norm.LINF):
        self.logger = logging.getLogger(__name__)
        self.norm = Norm(norm)
        self.N_bar = int(N_bar)
        self.delta_est = NoiseEstimatorState(N_bar, rho_delta, self.norm)
        self.zeta_est = NoiseEstimatorState(N_bar, rho_zeta, self.norm)
        self.epsilon_est = NoiseEstimatorState(N_bar, rho_epsilon, self.norm)
        self.gamma_star_est = LipschitzEstimatorState(N_bar, self.norm)
        self.gamma_g_est = LipschitzEstimatorState(N_bar, self.norm)
        self.snapshot: Optional[EstimatorSnapshot] = None

    @classmethod
    def for_training(cls, data: TrainingData, N_bar: int, norm: Norm = Norm.LINF) -> "EstimatorBundle":
        """Bundle whose neighbourhood radii come from the training data"""
        if data is None or len(data) == 0:
            raise ValueError("Training data is empty")
        xu = np.hstack([data.x, data.u[:, np.newaxis]])
        return cls(
            N_bar,
            rho_delta=default_rho(data.omega, norm),
            rho_zeta=default_rho(data.u, norm),
            rho_epsilon=default_rho(xu, norm),
            norm=norm,
        )

    @property
    def delta_hat(self) -> float:
        return self.delta_est.eps_hat

    @property
    def zeta_hat(self) -> float:
        return self.zeta_est.eps_hat

    @property
    def epsilon_hat(self) -> float:
        return self.epsilon_est.eps_hat

    @property
    def gamma_star_hat(self) -> float:
        return self.gamma_star_est.gamma_hat

    @property
    def gamma_g_hat(self) -> float:
        return self.gamma_g_est.gamma_hat

    def gamma_g_pipeline(self, u: float, x_next) -> "EstimatorBundle":
        prev = self.zeta_est.eps_hat
        self.zeta_est.update(u, x_next)
        self.gamma_g_est.update(u, x_next, self.zeta_est.eps_hat, prev)
        return self

    def ingest_measurement(self, omega, u: float, x, x_next,
                           track_epsilon: bool = False) -> "EstimatorBundle":
        """Feed one completed measurement (ω_t, u_t, x_t, x_{t+1})"""
        prev = self.delta_est.eps_hat
        self.delta_est.update(omega, u)
        self.gamma_star_est.update(omega, u, self.delta_est.eps_hat, prev)
        self.gamma_g_pipeline(u, x_next)
        if track_epsilon:
            self.epsilon_est.update(np.concatenate([_as_row(x), [float(u)]]), x_next)
        return self

    def seed_from_training(self, data: TrainingData) -> EstimatorSnapshot:
        if data is None or len(data) == 0:
            raise ValueError("Training data is empty")
        for i in range(len(data)):
            self.ingest_measurement(data.omega[i], data.u[i], data.x[i], data.x_next[i],
                                    track_epsilon=True)
        self.snapshot = EstimatorSnapshot(
            delta_hat=self.delta_hat,
            zeta_hat=self.zeta_hat,
            epsilon_hat=self.epsilon_hat,
            gamma_star_hat=self.gamma_star_hat,
            gamma_g_hat=self.gamma_g_hat,
            samples=len(data),
        )
        self.logger.info(
            f"Estimators seeded on {len(data)} samples: delta={self.delta_hat:.4g}, "
            f"zeta={self.zeta_hat:.4g}, epsilon={self.epsilon_hat:.4g}, "
            f"gamma*={self.gamma_star_hat:.4g}, gamma_g={self.gamma_g_hat:.4g}"
        )
        return self.snapshot


def gamma_g_pipeline(bundle: EstimatorBundle, u: float, x_next) -> EstimatorBundle:
    return bundle.gamma_g_pipeline(u, x_next)


def seed_from_training(bundle: EstimatorBundle, data: TrainingData) -> EstimatorBundle:
    bundle.seed_from_training(data)
    return bundle


def batch_noise_bound(xi: np.ndarray, z: np.ndarray, rho: float, norm: Norm = Norm.LINF) -> float:
    """Offline counterpart of the noise-bound estimator with unlimited memory"""
    xi = np.asarray(xi, dtype=float)
    z = np.asarray(z, dtype=float)
    xi = xi[:, np.newaxis] if xi.ndim == 1 else xi
    z = z[:, np.newaxis] if z.ndim == 1 else z
    best = 0.0
    for start in range(0, xi.shape[0], _PAIR_BLOCK):
        block = slice(start, start + _PAIR_BLOCK)
        near = pairwise_distance(xi[block], xi, norm) <= rho
        if not np.any(near):
            continue
        dz = pairwise_distance(z[block], z, norm)
        best = max(best, 0.5 * float(np.max(np.where(near, dz, 0.0))))
    return best


def batch_lipschitz_constant(xi: np.ndarray, z: np.ndarray, eps: float, norm: Norm = Norm.LINF) -> float:
    """max(0, max over distinct pairs of (‖Δz‖ − 2ε)/‖Δξ‖)"""
    xi = np.asarray(xi, dtype=float)
    z = np.asarray(z, dtype=float)
    xi = xi[:, np.newaxis] if xi.ndim == 1 else xi
    z = z[:, np.newaxis] if z.ndim == 1 else z
    best = 0.0
    for start in range(0, xi.shape[0], _PAIR_BLOCK):
        block = slice(start, start + _PAIR_BLOCK)
        dist = pairwise_distance(xi[block], xi, norm)
        dz = pairwise_distance(z[block], z, norm)
        with np.errstate(divide="ignore", invalid="ignore"):
            slopes = np.where(dist > 0, (dz - 2.0 * eps) / dist, -np.inf)
        best = max(best, float(np.max(slopes)))
    return best
