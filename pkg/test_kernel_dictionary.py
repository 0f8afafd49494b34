"""
Tests for kernel evaluation and dictionary growth
"""

import numpy as np
import pytest

from app.services.kernel_dictionary import (
    Dictionary,
    KernelSpec,
    coherence,
    kernel_eval,
    kernel_matrix,
    kernel_vector,
    make_regressor,
    maybe_add_center,
)


class TestKernel:
    def test_gaussian_value(self):
        spec = KernelSpec(width=0.5)
        a, b = np.array([0.0, 0.0]), np.array([0.3, 0.4])
        assert kernel_eval(spec, a, b) == pytest.approx(np.exp(-0.25 / (2 * 0.25)))

    def test_unit_width_unit_distance(self):
        spec = KernelSpec(width=1.0)
        assert kernel_eval(spec, [0.0, 0.0], [1.0, 0.0]) == pytest.approx(np.exp(-0.5))
        assert kernel_eval(spec, [0.0, 0.0], [1.0, 0.0]) == pytest.approx(0.60653, abs=1e-5)

    def test_symmetric(self):
        spec = KernelSpec(width=0.4)
        rng = np.random.default_rng(8)
        P, Q = rng.normal(size=(6, 4)), rng.normal(size=(5, 4))
        np.testing.assert_allclose(kernel_matrix(spec, P, Q), kernel_matrix(spec, Q, P).T)
        for a, b in zip(P, Q):
            assert kernel_eval(spec, a, b) == kernel_eval(spec, b, a)

    def test_kernel_of_identical_points_is_one(self):
        spec = KernelSpec(width=0.3)
        assert kernel_eval(spec, [0.1, 0.2], [0.1, 0.2]) == pytest.approx(1.0)

    def test_matrix_matches_pointwise(self):
        spec = KernelSpec(width=0.7)
        rng = np.random.default_rng(3)
        P, C = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        K = kernel_matrix(spec, P, C)
        assert K.shape == (4, 3)
        for i in range(4):
            for j in range(3):
                assert K[i, j] == pytest.approx(kernel_eval(spec, P[i], C[j]))

    def test_invalid_width(self):
        with pytest.raises(ValueError):
            KernelSpec(width=0.0)

    def test_regressor_dimension_mismatch(self):
        with pytest.raises(ValueError):
            make_regressor([0.0, 1.0], [0.0])


class TestDictionary:
    def test_first_regressor_always_admitted(self):
        d = Dictionary(threshold=0.9, spec=KernelSpec(width=0.3))
        assert coherence(d.spec, np.array([0.0, 0.0]), d) == 0.0
        d, added = maybe_add_center(d, np.array([0.0, 0.0]))
        assert added and d.size == 1

    def test_coherent_regressor_rejected(self):
        d = Dictionary(threshold=0.9, spec=KernelSpec(width=1.0))
        d, _ = maybe_add_center(d, np.array([0.0, 0.0]))
        d2, added = maybe_add_center(d, np.array([0.01, 0.0]))
        assert not added
        assert d2 is d

    def test_distant_regressor_admitted_and_original_untouched(self):
        d = Dictionary(threshold=0.9, spec=KernelSpec(width=0.3))
        d, _ = maybe_add_center(d, np.array([0.0, 0.0]))
        d2, added = maybe_add_center(d, np.array([1.0, 1.0]))
        assert added
        assert d.size == 1 and d2.size == 2
        np.testing.assert_allclose(d2.centers[1], [1.0, 1.0])

    def test_coherence_stays_below_threshold(self):
        rng = np.random.default_rng(0)
        d = Dictionary(threshold=0.8, spec=KernelSpec(width=0.3))
        for omega in rng.uniform(-1, 1, size=(200, 2)):
            d, _ = maybe_add_center(d, omega)
        K = kernel_matrix(d.spec, d.centers, d.centers)
        off_diagonal = K[~np.eye(d.size, dtype=bool)]
        assert off_diagonal.max() <= 0.8 + 1e-12

    def test_adding_twice_changes_at_most_once(self):
        rng = np.random.default_rng(5)
        d = Dictionary(threshold=0.9, spec=KernelSpec(width=0.3))
        for omega in rng.uniform(-1, 1, size=(50, 2)):
            once, _ = maybe_add_center(d, omega)
            twice, added_again = maybe_add_center(once, omega)
            assert not added_again
            assert twice is once
            d = once

    def test_size_saturates_on_bounded_stream(self):
        # regressors drawn from a finite lattice in [-1, 1]²: once every node
        # has been offered, nothing can be admitted again
        rng = np.random.default_rng(11)
        axis = np.linspace(-1.0, 1.0, 20)
        nodes = np.array([[a, b] for a in axis for b in axis])
        d = Dictionary(threshold=0.9, spec=KernelSpec(width=0.3))
        sizes = []
        for index in rng.integers(0, len(nodes), size=10_000):
            d, _ = maybe_add_center(d, nodes[index])
            sizes.append(d.size)
        assert sizes[-1] == sizes[-1000]
        assert 1 < sizes[-1] < len(nodes)

    def test_centers_are_read_only(self):
        d, _ = maybe_add_center(Dictionary(threshold=0.9), np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            d.centers[0, 0] = 5.0

    def test_kernel_vector_order_follows_insertion(self):
        spec = KernelSpec(width=0.5)
        d = Dictionary(threshold=0.9, spec=spec)
        for c in ([0.0, 0.0], [2.0, 0.0], [0.0, 2.0]):
            d, _ = maybe_add_center(d, np.array(c))
        k = kernel_vector(spec, np.array([2.0, 0.0]), d)
        assert k[1] == pytest.approx(1.0)
        assert k[0] == pytest.approx(k[2] * np.exp(-spec.gamma * 4.0) / np.exp(-spec.gamma * 8.0))

    def test_empty_kernel_vector(self):
        d = Dictionary(threshold=0.5)
        assert d.kernel_vector(np.array([0.0, 0.0])).shape == (0,)

    @pytest.mark.parametrize("threshold", [0.0, 1.0, -0.1])
    def test_threshold_bounds(self, threshold):
        with pytest.raises(ValueError):
            Dictionary(threshold=threshold)
