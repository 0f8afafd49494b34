"""
Direct inverse controller
Offline training pass over D_N and online control with static or adaptive tuning
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Deque, Dict, Optional, Tuple, Union

import joblib
import numpy as np

from app.services.estimators import EstimatorBundle
from app.services.kernel_dictionary import Dictionary, KernelSpec, make_regressor, maybe_add_center
from app.services.projection_learning import (
    MEMBERSHIP_TOL,
    Slab,
    SlabEmptyError,
    apsm_update,
    build_measurement_slabs,
    build_stability_slab,
    extend_weights,
)
from app.services.set_membership import (
    BoundsOracle,
    DataPoint,
    Norm,
    TrainingData,
    timevarying_gamma,
    vector_norm,
)
from app.services.tuning import Tuning, select_gamma_delta


class ControlMode(Enum):
    STATIC = "static"
    ADAPTIVE = "adaptive"


class EmptySlabPolicy(Enum):
    STRICT = "strict"
    MIDPOINT = "midpoint"


class TimestampOrderError(ValueError):
    """Training samples supplied out of time order"""


@dataclass
class StepDiagnostics:
    """What one control step did"""
    t: int
    u: float
    x_norm: float
    dict_size: int
    centers_added: int
    slab_lo: float
    slab_hi: float
    slab_empty: bool
    fallback_used: bool
    robust_ok: bool
    gamma_delta_t: float
    delta_hat: Optional[float] = None
    zeta_hat: Optional[float] = None
    gamma_star_hat: Optional[float] = None
    gamma_g_hat: Optional[float] = None
    reference_clamped: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class DirectInverseController:
    """
    Kernel-expansion controller u_t = a_tᵀK(ω⁺_t, W_t) learned by
    averaged hyperslab projections under a robust stability constraint.
    """

    def __init__(self, data: TrainingData, tuning: Tuning, kernel: KernelSpec,
                 mode: Union[ControlMode, str] = ControlMode.STATIC,
                 empty_slab_policy: Union[EmptySlabPolicy, str] = EmptySlabPolicy.STRICT,
                 estimators: Optional[EstimatorBundle] = None):
        self.logger = logging.getLogger(__name__)
        if data is None or len(data) == 0:
            raise ValueError("Controller needs nonempty training data")
        self.bounds_data = data
        self.tuning = tuning
        self.mode = ControlMode(mode)
        self.policy = EmptySlabPolicy(empty_slab_policy)
        self.norm = Norm(tuning.norm)
        self.dictionary = Dictionary(threshold=tuning.mu_bar, spec=kernel)
        self.weights = np.zeros(0)
        self.history: Deque[DataPoint] = deque(maxlen=tuning.q)
        self.t = 0
        self.last_training_t: Optional[int] = None
        self.gamma_delta_t = tuning.gamma_delta_t

        # static bounds use the inflated training estimates
        self.oracle = BoundsOracle(data, tuning.delta, tuning.gamma_star, self.norm)

        self.estimators: Optional[EstimatorBundle] = None
        if self.mode is ControlMode.ADAPTIVE:
            if estimators is None:
                estimators = EstimatorBundle.for_training(data, tuning.N_bar, self.norm)
                estimators.seed_from_training(data)
            self.estimators = estimators

        # (x_{t-1}, u_{t-1}) waiting for its successor state
        self._pending: Optional[Tuple[np.ndarray, float, int]] = None
        self._last_omega: Optional[np.ndarray] = None

    @property
    def dict_size(self) -> int:
        return self.dictionary.size

    def evaluate(self, omega: np.ndarray) -> float:
        """f_t(ω) with the current weights"""
        if self.dictionary.size == 0:
            return 0.0
        return float(self.weights @ self.dictionary.kernel_vector(omega))

    def _admit(self, *regressors: Optional[np.ndarray]) -> int:
        added = 0
        for omega in regressors:
            if omega is None:
                continue
            self.dictionary, was_added = maybe_add_center(self.dictionary, omega)
            added += int(was_added)
        if added:
            self.weights = extend_weights(self.weights, self.dictionary.size)
        return added

    def _measurement_delta(self, online: bool) -> float:
        if self.mode is ControlMode.ADAPTIVE:
            return self.estimators.delta_hat if online else self.tuning.delta_hat_train
        return self.tuning.delta

    def _stability_bounds(self, omega_plus: np.ndarray, online: bool) -> Tuple[float, float]:
        if self.mode is ControlMode.ADAPTIVE and online:
            gamma = max(timevarying_gamma(self.estimators.gamma_star_hat,
                                          self.tuning.gamma_star_hat_train,
                                          self.tuning.c_gamma_star), 0.0)
            if gamma != self.oracle.gamma:
                self.oracle = BoundsOracle(self.bounds_data, self.tuning.delta, gamma, self.norm)
        return self.oracle.bounds(omega_plus)

    def _update(self, omega_plus: np.ndarray, x_t: np.ndarray, t: int, online: bool) -> Tuple[Slab, Slab, bool]:
        """Weight update at ω⁺; returns (slab built, slab used, fallback flag)"""
        slabs = build_measurement_slabs(list(self.history), self.dictionary, self._measurement_delta(online))
        stability = build_stability_slab(
            omega_plus, x_t, self.gamma_delta_t, self.tuning.sigma,
            self._stability_bounds(omega_plus, online), self.dictionary, self.norm,
        )
        used, fallback = stability, False
        if stability.is_empty:
            if self.policy is EmptySlabPolicy.STRICT:
                raise SlabEmptyError(
                    f"Stability slab empty at t={t}: lo={stability.lo:.6g} > hi={stability.hi:.6g}", t=t
                )
            self.logger.warning(f"Stability slab empty at t={t}; projecting on its midpoint hyperplane")
            used, fallback = stability.midpoint_hyperplane(), True
        self.weights = apsm_update(self.weights, slabs, used)
        return stability, used, fallback

    def training_step(self, x_t, x_next, u_t: float, t: Optional[int] = None) -> "DirectInverseController":
        """One design step on a stored measurement (t < 0 in the data clock)"""
        t = (self.last_training_t + 1 if self.last_training_t is not None else -1) if t is None else int(t)
        if self.last_training_t is not None and t <= self.last_training_t:
            raise TimestampOrderError(
                f"Training sample at t={t} arrived after t={self.last_training_t}"
            )
        x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
        omega = make_regressor(x_t, x_next)

        self._admit(omega, self._last_omega)
        self._update(omega, x_t, t, online=False)

        self.history.append(DataPoint(u=float(u_t), omega=omega, t=t))
        self._last_omega = omega
        self.last_training_t = t
        return self

    def train(self, data: Optional[TrainingData] = None) -> "DirectInverseController":
        data = self.bounds_data if data is None else data
        for i in range(len(data)):
            self.training_step(data.x[i], data.x_next[i], data.u[i], t=int(data.t[i]))
        self.logger.info(f"Training pass done: {len(data)} samples, {self.dictionary.size} centers")
        return self

    def _clamp_reference(self, r_next: np.ndarray) -> Tuple[np.ndarray, bool]:
        r_norm = vector_norm(r_next, self.norm)
        r_bar = self.tuning.r_bar
        if r_norm <= r_bar:
            return r_next, False
        self.logger.warning(f"Reference norm {r_norm:.4g} exceeds r_bar={r_bar:.4g} at t={self.t}; clamping")
        if self.norm is Norm.LINF:
            return np.clip(r_next, -r_bar, r_bar), True
        return r_next * (r_bar / r_norm), True

    def control_step(self, x_t, r_next) -> Tuple[float, StepDiagnostics]:
        """Compute u_t for the measured x_t and the next reference r_{t+1}"""
        t = self.t
        x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
        r_next, clamped = self._clamp_reference(np.atleast_1d(np.asarray(r_next, dtype=float)))

        # the previous input is now a complete measurement
        completed = None
        if self._pending is not None:
            x_prev, u_prev, t_prev = self._pending
            completed = make_regressor(x_prev, x_t)
            if self.mode is ControlMode.ADAPTIVE:
                self.estimators.ingest_measurement(completed, u_prev, x_prev, x_t)
            self.history.append(DataPoint(u=u_prev, omega=completed, t=t_prev))
            self._last_omega = completed
        if self.mode is ControlMode.ADAPTIVE:
            self.gamma_delta_t = select_gamma_delta(
                self.estimators.gamma_g_hat, self.tuning.c_gamma_g, self.tuning.lambda2_star,
                self.tuning.gamma_delta_bar, self.tuning.fraction,
            )

        omega_plus = make_regressor(x_t, r_next)
        added = self._admit(omega_plus, self._last_omega)
        stability, used, fallback = self._update(omega_plus, x_t, t, online=True)

        k_plus = self.dictionary.kernel_vector(omega_plus)
        u_t = float(self.weights @ k_plus)
        robust_ok = (not stability.is_empty
                     and stability.lo - MEMBERSHIP_TOL <= u_t <= stability.hi + MEMBERSHIP_TOL)

        diagnostics = StepDiagnostics(
            t=t,
            u=u_t,
            x_norm=vector_norm(x_t, self.norm),
            dict_size=self.dictionary.size,
            centers_added=added,
            slab_lo=stability.lo,
            slab_hi=stability.hi,
            slab_empty=stability.is_empty,
            fallback_used=fallback,
            robust_ok=robust_ok,
            gamma_delta_t=self.gamma_delta_t,
            reference_clamped=clamped,
        )
        if self.mode is ControlMode.ADAPTIVE:
            diagnostics.delta_hat = self.estimators.delta_hat
            diagnostics.zeta_hat = self.estimators.zeta_hat
            diagnostics.gamma_star_hat = self.estimators.gamma_star_hat
            diagnostics.gamma_g_hat = self.estimators.gamma_g_hat

        self._pending = (x_t, u_t, t)
        self.t = t + 1
        return u_t, diagnostics

    def save(self, filepath: Union[str, Path]) -> Path:
        """Persist the trained controller"""
        filepath = Path(filepath)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        joblib.dump(self, filepath)
        self.logger.info(f"Controller saved to {filepath}")
        return filepath

    @classmethod
    def load(cls, filepath: Union[str, Path]) -> "DirectInverseController":
        controller = joblib.load(filepath)
        if not isinstance(controller, cls):
            raise TypeError(f"{filepath} does not hold a {cls.__name__}")
        return controller

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("logger", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self.logger = logging.getLogger(__name__)
