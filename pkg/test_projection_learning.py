"""
Tests for hyperslab projections and the averaged-projection weight update
"""

import numpy as np
import pytest
from scipy.optimize import minimize

from app.services.kernel_dictionary import Dictionary, KernelSpec, maybe_add_center
from app.services.projection_learning import (
    InfeasibleProjectionError,
    Slab,
    SlabEmptyError,
    apsm_update,
    build_measurement_slab,
    build_measurement_slabs,
    build_stability_slab,
    extend_weights,
    project_onto_slab,
)
from app.services.set_membership import DataPoint, Norm


def slsqp_projection(a, slab):
    """Reference projection by constrained least squares"""
    cons = [
        {"type": "ineq", "fun": lambda w: w @ slab.k - slab.lo},
        {"type": "ineq", "fun": lambda w: slab.hi - w @ slab.k},
    ]
    result = minimize(lambda w: 0.5 * np.sum((w - a) ** 2), a, jac=lambda w: w - a,
                      constraints=cons, method="SLSQP", options={"ftol": 1e-12, "maxiter": 200})
    return result.x


def active_set_projection(a, slab):
    """Reference projection: best feasible point over the three active sets"""
    candidates = [a] if slab.lo <= a @ slab.k <= slab.hi else []
    for face in (slab.lo, slab.hi):
        step = np.linalg.lstsq(slab.k[np.newaxis, :], [face - a @ slab.k], rcond=None)[0]
        candidates.append(a + step)
    return min(candidates, key=lambda c: np.sum((c - a) ** 2))


@pytest.fixture
def dictionary():
    d = Dictionary(threshold=0.9, spec=KernelSpec(width=0.5))
    for c in ([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]):
        d, _ = maybe_add_center(d, np.array(c))
    return d


class TestProjection:
    def test_matches_active_set_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(1000):
            dim = int(rng.integers(1, 21))
            a, k = rng.normal(size=dim), rng.normal(size=dim)
            lo = float(a @ k) + rng.normal()
            slab = Slab(k, lo, lo + rng.exponential())
            np.testing.assert_allclose(project_onto_slab(a, slab), active_set_projection(a, slab), rtol=0, atol=1e-8)

    def test_closed_form_example(self):
        slab = Slab(np.array([1.0, 0.0]), -1.0, 1.0)
        np.testing.assert_allclose(project_onto_slab(np.array([3.0, 2.0]), slab), [1.0, 2.0])

    def test_idempotent(self):
        rng = np.random.default_rng(22)
        for _ in range(100):
            dim = int(rng.integers(1, 8))
            k = rng.normal(size=dim)
            lo = rng.normal()
            slab = Slab(k, lo, lo + rng.exponential())
            once = project_onto_slab(rng.normal(size=dim) * 3, slab)
            np.testing.assert_allclose(project_onto_slab(once, slab), once, rtol=0, atol=1e-12)

    def test_matches_constrained_least_squares(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = rng.normal(size=4)
            k = rng.uniform(0.1, 1.0, size=4)
            v = float(a @ k)
            slab = Slab(k, v + 0.3, v + 0.8)
            np.testing.assert_allclose(project_onto_slab(a, slab), slsqp_projection(a, slab), atol=1e-6)

    def test_member_is_fixed_point(self):
        a = np.array([0.2, 0.1])
        slab = Slab(np.array([1.0, 1.0]), 0.0, 1.0)
        np.testing.assert_array_equal(project_onto_slab(a, slab), a)

    def test_projection_lands_on_nearer_face(self):
        slab = Slab(np.array([1.0, 0.0]), -0.5, 0.5)
        assert slab.value(project_onto_slab(np.array([2.0, 3.0]), slab)) == pytest.approx(0.5)
        assert slab.value(project_onto_slab(np.array([-2.0, 3.0]), slab)) == pytest.approx(-0.5)

    def test_empty_slab_raises(self):
        with pytest.raises(SlabEmptyError):
            project_onto_slab(np.zeros(2), Slab(np.ones(2), 1.0, 0.0))

    def test_zero_direction_outside_is_infeasible(self):
        with pytest.raises(InfeasibleProjectionError):
            project_onto_slab(np.zeros(2), Slab(np.zeros(2), 0.5, 1.0))

    def test_zero_direction_inside_is_identity(self):
        np.testing.assert_array_equal(project_onto_slab(np.ones(2), Slab(np.zeros(2), -1.0, 1.0)), np.ones(2))

    def test_midpoint_hyperplane(self):
        plane = Slab(np.ones(2), 1.0, 0.0).midpoint_hyperplane()
        assert plane.lo == plane.hi == pytest.approx(0.5)
        assert not plane.is_empty


class TestWeights:
    def test_extend_pads_with_zeros(self):
        np.testing.assert_array_equal(extend_weights(np.array([1.0, 2.0]), 4), [1.0, 2.0, 0.0, 0.0])

    def test_extend_never_shrinks(self):
        with pytest.raises(ValueError):
            extend_weights(np.ones(3), 2)


class TestSlabs:
    def test_measurement_slab_is_centered_on_input(self, dictionary):
        dp = DataPoint(u=0.4, omega=np.array([0.5, 0.5]), t=-3)
        slab = build_measurement_slab(dp, dictionary, 0.05)
        assert (slab.lo, slab.hi) == pytest.approx((0.35, 0.45))
        np.testing.assert_allclose(slab.k, dictionary.kernel_vector(dp.omega))

    def test_batch_slabs_match_single(self, dictionary):
        points = [DataPoint(u=0.1 * i, omega=np.array([0.2 * i, -0.1 * i]), t=i) for i in range(4)]
        batch = build_measurement_slabs(points, dictionary, 0.02)
        for (t, slab), dp in zip(batch, points):
            single = build_measurement_slab(dp, dictionary, 0.02)
            assert t == dp.t
            np.testing.assert_allclose(slab.k, single.k)
            assert (slab.lo, slab.hi) == pytest.approx((single.lo, single.hi))

    def test_stability_slab_limits(self, dictionary):
        slab = build_stability_slab(np.array([0.0, 0.2]), np.array([0.5]), 0.1, 0.2, (-0.1, 0.3), dictionary, Norm.LINF)
        margin = 0.1 * 0.5 + 0.2
        assert slab.lo == pytest.approx(0.3 - margin)
        assert slab.hi == pytest.approx(-0.1 + margin)

    def test_stability_slab_empty_when_gap_exceeds_margin(self, dictionary):
        slab = build_stability_slab(np.array([0.0, 0.2]), np.array([0.0]), 0.1, 0.0, (-0.1, 0.3), dictionary)
        assert slab.is_empty


class TestApsm:
    def test_result_satisfies_stability_slab(self, dictionary):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.normal(size=3)
            recent = [(i, Slab(rng.uniform(0, 1, 3), -0.1, 0.1)) for i in range(5)]
            stability = Slab(rng.uniform(0.1, 1, 3), 0.2, 0.4)
            a_next = apsm_update(a, recent, stability)
            assert stability.contains(a_next, tol=1e-9)

    def test_no_violation_means_plain_stability_projection(self):
        a = np.array([0.0, 0.0])
        recent = [(0, Slab(np.array([1.0, 0.0]), -1.0, 1.0))]
        stability = Slab(np.array([0.0, 1.0]), 0.5, 1.0)
        np.testing.assert_allclose(apsm_update(a, recent, stability), [0.0, 0.5])

    def test_average_of_violated_projections(self):
        a = np.zeros(2)
        recent = [
            (0, Slab(np.array([1.0, 0.0]), 1.0, 2.0)),
            (1, Slab(np.array([0.0, 1.0]), 1.0, 2.0)),
            (2, Slab(np.array([1.0, 1.0]), -1.0, 1.0)),  # satisfied
        ]
        wide = Slab(np.array([1.0, 1.0]), -10.0, 10.0)
        np.testing.assert_allclose(apsm_update(a, recent, wide), [0.5, 0.5])

    def test_empty_stability_slab_raises(self):
        with pytest.raises(SlabEmptyError):
            apsm_update(np.zeros(2), [], Slab(np.ones(2), 1.0, 0.0))

    def test_shrinks_distance_to_common_point(self):
        # a* lies in every slab, so the update cannot move away from it
        rng = np.random.default_rng(8)
        a_star = rng.normal(size=3)
        slabs = []
        for i in range(6):
            k = rng.uniform(0.1, 1, 3)
            slabs.append((i, Slab(k, k @ a_star - 0.05, k @ a_star + 0.05)))
        k = rng.uniform(0.1, 1, 3)
        stability = Slab(k, k @ a_star - 0.2, k @ a_star + 0.2)
        a = a_star + rng.normal(size=3)
        a_next = apsm_update(a, slabs, stability)
        assert np.linalg.norm(a_next - a_star) <= np.linalg.norm(a - a_star) + 1e-12
