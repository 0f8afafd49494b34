"""
Tuning service
Selection of γ_Δ, σ and x̄ from the seeded estimates, and the admissibility
report the closed loop is checked against before a run
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.services.estimators import EstimatorBundle
from app.services.kernel_dictionary import make_regressor
from app.services.set_membership import (
    BoundsOracle,
    Norm,
    TrainingData,
    estimate_D0,
    vector_norm,
)

logger = logging.getLogger(__name__)

MAX_FIXED_POINT_ITERATIONS = 100
FIXED_POINT_RTOL = 1e-6


class TuningError(ValueError):
    """Tuning parameters cannot be made consistent"""


@dataclass
class Tuning:
    """
    All scalars the controller runs with.
    delta, gamma_star, gamma_g and epsilon hold the inflated training
    estimates (estimate + c_·); the raw estimates are kept in *_hat_train.
    """
    delta: float = 0.0
    gamma_star: float = 0.0
    gamma_g: float = 0.0
    epsilon: float = 0.0
    zeta: float = 0.0
    sigma: float = 0.0
    gamma_delta_bar: float = 0.3
    gamma_delta_t: float = 0.0
    lambda1_star: float = 1.1
    lambda2_star: float = 1.1
    beta_star: float = 0.0
    r_bar: float = 0.0
    x_bar: float = 0.0
    c_delta: float = 0.0
    c_gamma_star: float = 0.0
    c_gamma_g: float = 0.0
    c_epsilon: float = 0.0
    mu_bar: float = 0.9
    q: int = 10
    N_bar: int = 500

    delta_hat_train: float = 0.0
    zeta_hat_train: float = 0.0
    epsilon_hat_train: float = 0.0
    gamma_star_hat_train: float = 0.0
    gamma_g_hat_train: float = 0.0
    D0: float = 0.0
    fraction: float = 0.5
    sigma_margin: float = 1.05
    samples: int = 4000
    sup_seed: int = 0
    x_cap: Optional[float] = None
    norm: str = Norm.LINF.value
    forced: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.q < 1:
            raise ValueError(f"q must be at least 1, got {self.q}")
        if self.N_bar < 1:
            raise ValueError(f"N_bar must be at least 1, got {self.N_bar}")
        if not 0.0 < self.mu_bar < 1.0:
            raise ValueError(f"mu_bar must lie in (0, 1), got {self.mu_bar}")
        for name in ("c_delta", "c_gamma_star", "c_gamma_g", "c_epsilon", "sigma", "r_bar"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        self.norm = Norm(self.norm).value

    @property
    def norm_kind(self) -> Norm:
        return Norm(self.norm)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Tuning":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"Unknown tuning fields: {unknown}")
        return cls(**payload)


def x_bar_formula(lambda1_star: float, r_bar: float, gamma_g: float, lambda2_star: float,
                  sigma: float, epsilon: float, beta_star: float, gamma_delta: float) -> float:
    denominator = 1.0 - gamma_g * lambda2_star * gamma_delta
    if denominator <= 0:
        raise TuningError(
            f"gamma_delta_bar too large for the guessed lambda2* and estimated gamma_g "
            f"(1 - {gamma_g:.4g}*{lambda2_star:.4g}*{gamma_delta:.4g} = {denominator:.4g})"
        )
    numerator = lambda1_star * r_bar + gamma_g * lambda2_star * sigma + lambda2_star * epsilon + beta_star
    return numerator / denominator


def compute_x_bar(tuning: Tuning, sigma: Optional[float] = None) -> float:
    """
    Guaranteed state-norm ceiling for the tuning (with an optional σ override).
    Uses γ̄_Δ in both modes; in static mode γ_Δ ≤ γ̄_Δ, so the result upper-bounds
    the static ceiling.
    """
    return x_bar_formula(
        tuning.lambda1_star, tuning.r_bar, tuning.gamma_g, tuning.lambda2_star,
        tuning.sigma if sigma is None else sigma, tuning.epsilon, tuning.beta_star,
        tuning.gamma_delta_bar,
    )


def gamma_delta_upper_limit(gamma_g_hat: float, c_gamma_g: float, lambda2_star: float) -> float:
    slope = (gamma_g_hat + c_gamma_g) * lambda2_star
    return np.inf if slope <= 0 else 1.0 / slope


def select_gamma_delta(gamma_g_hat: float, c_gamma_g: float, lambda2_star: float,
                       gamma_delta_bar: float, fraction: float = 0.5) -> float:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if gamma_delta_bar <= 0 or lambda2_star <= 0:
        raise ValueError("gamma_delta_bar and lambda2_star must be positive")
    cap = min(gamma_delta_upper_limit(gamma_g_hat, c_gamma_g, lambda2_star), gamma_delta_bar)
    return fraction * cap


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= FIXED_POINT_RTOL * max(abs(a), abs(b)) or a == b


def select_sigma(oracle: BoundsOracle, tuning: Tuning, x_bar_init: Optional[float] = None,
                 r_bar: Optional[float] = None, samples: Optional[int] = None,
                 margin: Optional[float] = None, seed: Optional[int] = None,
                 x_cap: Optional[float] = None,
                 max_iterations: int = MAX_FIXED_POINT_ITERATIONS) -> Tuple[float, float]:
    """
    Resolve the σ ↔ x̄ dependence by fixed-point iteration.

    σ needs the bound gap over B_x̄ × B_r̄ and x̄ needs σ. Starting from
    x̄ = λ₁*·r̄ both maps are nondecreasing, so the iterates climb until the
    sampled gap stops growing. Returns (σ, x̄).
    """
    r_bar = tuning.r_bar if r_bar is None else r_bar
    samples = tuning.samples if samples is None else samples
    margin = tuning.sigma_margin if margin is None else margin
    seed = tuning.sup_seed if seed is None else seed
    x_cap = tuning.x_cap if x_cap is None else x_cap
    if margin <= 1.0:
        raise ValueError(f"sigma margin must exceed 1, got {margin}")
    x_bar = tuning.lambda1_star * r_bar if x_bar_init is None else float(x_bar_init)

    def gap(radius: float) -> float:
        return estimate_D0(oracle, radius, r_bar, samples, seed=seed, x_cap=x_cap)

    sigma = margin * 0.5 * gap(x_bar)
    for iteration in range(1, max_iterations + 1):
        x_next = compute_x_bar(tuning, sigma)
        if x_cap is not None and x_next > x_cap:
            raise TuningError(
                f"sigma/x_bar fixed point diverged: x_bar={x_next:.4g} left the state box "
                f"(radius {x_cap:.4g}) after {iteration} iterations; training data too sparse or gamma* too large"
            )
        d0 = gap(x_next)
        sigma_next = margin * 0.5 * d0
        converged = _close(sigma_next, sigma) and _close(x_next, x_bar)
        sigma, x_bar = sigma_next, x_next
        if converged:
            x_bar = compute_x_bar(tuning, sigma)
            if x_bar == x_next or sigma >= 0.5 * gap(x_bar):
                logger.info(f"sigma/x_bar fixed point after {iteration} iterations: sigma={sigma:.6g}, x_bar={x_bar:.6g}")
                return sigma, x_bar

    raise TuningError(
        f"sigma/x_bar fixed point diverged: no convergence in {max_iterations} iterations "
        f"(last sigma={sigma:.4g}, x_bar={x_bar:.4g}); training data too sparse or gamma* too large"
    )


@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    value: Optional[float]
    limit: Optional[float]
    message: str
    severity: str = "error"  # 'error' or 'warning'


@dataclass
class HypothesisReport:
    checks: List[HypothesisCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.severity == "error")

    @property
    def failures(self) -> List[HypothesisCheck]:
        return [c for c in self.checks if not c.passed]

    def check(self, name: str) -> HypothesisCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "checks": [asdict(c) for c in self.checks],
            "failures": [c.name for c in self.failures],
        }


def _finite(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def validate_theorem2_hypotheses(tuning: Tuning, data: TrainingData,
                                 x0: Optional[Sequence[float]] = None,
                                 r_first: Optional[Sequence[float]] = None,
                                 x_box_radius: Optional[float] = None,
                                 u_box: Optional[Tuple[float, float]] = None,
                                 seed: Optional[int] = None) -> HypothesisReport:
    """
    Check the tuning against the conditions under which the closed loop is
    guaranteed to stay in B_x̄. Never raises on a violated condition.
    """
    norm = tuning.norm_kind
    report = HypothesisReport()
    oracle = BoundsOracle(data, tuning.delta, tuning.gamma_star, norm)

    # denominator of x̄ and the γ̄_Δ cap
    denominator = 1.0 - tuning.gamma_g * tuning.lambda2_star * tuning.gamma_delta_bar
    report.checks.append(HypothesisCheck(
        "x_bar_denominator", denominator > 0, denominator, 0.0,
        "1 - gamma_g*lambda2*gamma_delta_bar must be positive",
    ))
    limit = gamma_delta_upper_limit(tuning.gamma_g_hat_train, tuning.c_gamma_g, tuning.lambda2_star)
    report.checks.append(HypothesisCheck(
        "gamma_delta_bar_admissible", tuning.gamma_delta_bar < limit, tuning.gamma_delta_bar, _finite(limit),
        "gamma_delta_bar must lie below 1/((gamma_g_hat + c_gamma_g)*lambda2)",
    ))
    upper = min(limit, tuning.gamma_delta_bar)
    report.checks.append(HypothesisCheck(
        "gamma_delta_interval", 0.0 < tuning.gamma_delta_t < upper, tuning.gamma_delta_t, _finite(upper),
        "gamma_delta_t must lie in (0, min(1/((gamma_g_hat + c_gamma_g)*lambda2), gamma_delta_bar))",
    ))

    # σ against a sample set the selection never saw
    fresh_seed = tuning.sup_seed + 1 if seed is None else seed
    if tuning.x_bar > 0 and np.isfinite(tuning.x_bar):
        d0 = estimate_D0(oracle, tuning.x_bar, tuning.r_bar, tuning.samples, seed=fresh_seed,
                         x_cap=tuning.x_cap)
        report.checks.append(HypothesisCheck(
            "sigma_covers_gap", tuning.sigma >= 0.5 * d0, tuning.sigma, 0.5 * d0,
            "sigma must be at least half the bound gap over B_x_bar x B_r_bar (fresh sample)",
        ))
    else:
        report.checks.append(HypothesisCheck(
            "sigma_covers_gap", False, tuning.sigma, None, "x_bar is not a positive finite radius",
        ))

    if x_box_radius is not None:
        report.checks.append(HypothesisCheck(
            "ball_inside_state_box", tuning.x_bar <= x_box_radius, tuning.x_bar, x_box_radius,
            "B_x_bar must lie inside the state box X",
        ))

    n_x = data.n_x
    x0 = np.zeros(n_x) if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    r_first = np.zeros(n_x) if r_first is None else np.asarray(r_first, dtype=float).reshape(-1)
    x0_norm = vector_norm(x0, norm)
    report.checks.append(HypothesisCheck(
        "initial_state_in_ball", x0_norm <= tuning.x_bar, x0_norm, tuning.x_bar,
        "the initial state must lie in B_x_bar",
    ))
    lo_f, hi_f = oracle.bounds(make_regressor(x0, r_first))
    allowed = 2.0 * (tuning.gamma_delta_t * x0_norm + tuning.sigma)
    report.checks.append(HypothesisCheck(
        "initial_slab_nonempty", hi_f - lo_f <= allowed, hi_f - lo_f, allowed,
        "the first stability slab must be nonempty",
    ))

    if u_box is not None:
        lo_u, hi_u = u_box
        inside = bool(np.all((data.u >= lo_u) & (data.u <= hi_u)))
        report.checks.append(HypothesisCheck(
            "training_inputs_in_box", inside, float(np.max(np.abs(data.u))), float(max(abs(lo_u), abs(hi_u))),
            "training inputs should lie in the input box U", severity="warning",
        ))

    degenerate = len(data) < 2 or tuning.gamma_star_hat_train <= 0 or tuning.gamma_g_hat_train <= 0
    report.checks.append(HypothesisCheck(
        "estimates_not_degenerate", not degenerate, float(len(data)), 2.0,
        "zero Lipschitz estimates or fewer than two samples: training data is not informative",
        severity="warning",
    ))

    for c in report.failures:
        log = logger.warning if c.severity == "error" else logger.info
        log(f"Hypothesis check '{c.name}' failed: value={c.value}, limit={c.limit}")
    return report


def design_tuning(data: TrainingData, params: Any, norm: Norm = Norm.LINF,
                  x_cap: Optional[float] = None, seed: int = 0,
                  bundle: Optional[EstimatorBundle] = None) -> Tuple[Tuning, EstimatorBundle]:
    """
    Seed the estimators on D_N and select γ_Δ, σ and x̄.

    `params` carries the designer's constants (the experiment's tuning
    section): inflations, λ guesses, γ̄_Δ, fraction, margin, r̄, μ̄, q, N̄,
    samples and the optional `sigma`, `gamma_delta` and `x_bar` overrides.
    """
    norm = Norm(norm)
    if bundle is None:
        bundle = EstimatorBundle.for_training(data, params.N_bar, norm)
        bundle.seed_from_training(data)
    snap = bundle.snapshot
    if snap is None:
        raise ValueError("Estimator bundle has not been seeded")

    forced: List[str] = []
    tuning = Tuning(
        delta=snap.delta_hat + params.c_delta,
        gamma_star=snap.gamma_star_hat + params.c_gamma_star,
        gamma_g=snap.gamma_g_hat + params.c_gamma_g,
        epsilon=snap.epsilon_hat + params.c_epsilon,
        zeta=snap.zeta_hat,
        gamma_delta_bar=params.gamma_delta_bar,
        lambda1_star=params.lambda1_star,
        lambda2_star=params.lambda2_star,
        beta_star=params.beta_star,
        r_bar=params.r_bar,
        c_delta=params.c_delta,
        c_gamma_star=params.c_gamma_star,
        c_gamma_g=params.c_gamma_g,
        c_epsilon=params.c_epsilon,
        mu_bar=params.mu_bar,
        q=params.q,
        N_bar=params.N_bar,
        delta_hat_train=snap.delta_hat,
        zeta_hat_train=snap.zeta_hat,
        epsilon_hat_train=snap.epsilon_hat,
        gamma_star_hat_train=snap.gamma_star_hat,
        gamma_g_hat_train=snap.gamma_g_hat,
        fraction=params.fraction,
        sigma_margin=params.sigma_margin,
        samples=params.samples,
        sup_seed=seed,
        x_cap=x_cap,
        norm=norm.value,
    )

    if params.gamma_delta is not None:
        tuning.gamma_delta_t = float(params.gamma_delta)
        forced.append("gamma_delta")
    else:
        tuning.gamma_delta_t = select_gamma_delta(
            snap.gamma_g_hat, params.c_gamma_g, params.lambda2_star, params.gamma_delta_bar, params.fraction
        )

    oracle = BoundsOracle(data, tuning.delta, tuning.gamma_star, norm)
    if params.x_bar is not None:
        # the x̄ formula is undefined once γ̄_Δ breaks its cap
        tuning.x_bar = float(params.x_bar)
        forced.append("x_bar")
    if params.sigma is not None:
        tuning.sigma = float(params.sigma)
        if params.x_bar is None:
            tuning.x_bar = compute_x_bar(tuning)
        forced.append("sigma")
    elif params.x_bar is not None:
        tuning.sigma = tuning.sigma_margin * 0.5 * estimate_D0(
            oracle, tuning.x_bar, tuning.r_bar, tuning.samples, seed=seed, x_cap=x_cap
        )
    else:
        tuning.sigma, tuning.x_bar = select_sigma(oracle, tuning, x_bar_init=params.x_bar_init, x_cap=x_cap)
    tuning.D0 = estimate_D0(oracle, tuning.x_bar, tuning.r_bar, tuning.samples, seed=seed, x_cap=x_cap)
    tuning.forced = forced

    logger.info(
        f"Tuning designed: delta={tuning.delta:.4g}, gamma*={tuning.gamma_star:.4g}, gamma_g={tuning.gamma_g:.4g}, "
        f"sigma={tuning.sigma:.4g}, x_bar={tuning.x_bar:.4g}, gamma_delta={tuning.gamma_delta_t:.4g}"
    )
    return tuning, bundle
