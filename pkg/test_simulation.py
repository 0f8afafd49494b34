"""
Tests for plants, excitation, references and the closed-loop harness
"""

import copy
from pathlib import Path

import numpy as np
import pytest

from app.cli import generate, load_config, tune
from app.schemas import PlantConfig, TuningConfig
from app.services.controller import DirectInverseController
from app.services.kernel_dictionary import KernelSpec
from app.services.plants import (
    ExcitationPolicy,
    ExpressionPlant,
    LinearPlant,
    ReferenceSignal,
    ScalarTanhPlant,
    TwoStatePolynomialPlant,
    UnsupportedPlantError,
    build_plant,
    generate_training_data,
    plant_step,
)
from app.services.set_membership import Norm
from app.services.simulation import ESTIMATOR_COLUMNS, fit_gains, gamma_oracle, run_closed_loop
from app.services.tuning import design_tuning, validate_theorem2_hypotheses


class TestPlants:
    def test_scalar_tanh_map(self):
        plant = ScalarTanhPlant(a=0.2, b=1.0)
        np.testing.assert_allclose(plant.g(np.array([0.5]), 0.3), [0.1 + np.tanh(0.3)])

    def test_noise_stays_in_bound(self, tanh_plant):
        rng = np.random.default_rng(0)
        x = np.array([0.4])
        for _ in range(200):
            e = plant_step(tanh_plant, x, 0.1, rng) - tanh_plant.g(x, 0.1)
            assert np.max(np.abs(e)) <= tanh_plant.noise_bound + 1e-15

    def test_vectorised_map_matches_pointwise(self):
        plant = TwoStatePolynomialPlant()
        rng = np.random.default_rng(1)
        x, u = rng.uniform(-1, 1, size=(5, 2)), rng.uniform(-1, 1, size=5)
        expected = np.vstack([plant.g(x[i], u[i]) for i in range(5)])
        np.testing.assert_allclose(plant.g_many(x, u), expected)

    def test_expression_plant_matches_linear(self):
        linear = LinearPlant(A=[[0.5, 0.1], [0.0, 0.3]], B=[1.0, 0.5])
        expr = ExpressionPlant(["a*x1 + 0.1*x2 + u", "0.3*x2 + 0.5*u"], parameters={"a": 0.5})
        x = np.array([0.2, -0.4])
        np.testing.assert_allclose(expr.g(x, 0.7), linear.g(x, 0.7))

    def test_linear_shape_mismatch(self):
        with pytest.raises(ValueError):
            LinearPlant(A=[[1.0, 0.0], [0.0, 1.0]], B=[1.0])

    def test_build_from_config(self):
        plant = build_plant(PlantConfig(kind="scalar_tanh", parameters={"a": 0.2}, noise_bound=0.01))
        assert isinstance(plant, ScalarTanhPlant)
        assert plant.a == 0.2 and plant.noise_bound == 0.01


class TestExcitation:
    def test_grid_sweep_covers_cells(self, tanh_plant):
        data, meta = generate_training_data(
            tanh_plant, ExcitationPolicy(kind="grid_sweep", length=200, grid_x=10, grid_u=20)
        )
        assert len(data) == 200
        assert data.t[0] == -200 and data.t[-1] == -1
        assert len(np.unique(data.u)) == 20
        assert meta["discarded_pairs"] == 0

    @pytest.mark.parametrize("kind", ["uniform_random", "multilevel"])
    def test_rollouts_stay_in_state_box(self, kind):
        plant = ScalarTanhPlant(a=0.9, b=1.0, noise_bound=0.01, state_radius=1.5)
        data, meta = generate_training_data(plant, ExcitationPolicy(kind=kind, length=300, seed=2))
        assert np.all(np.abs(data.x_next) <= 1.5)
        assert np.all((data.u >= -1.0) & (data.u <= 1.0))
        assert meta["rows"] == 300

    def test_seeded_generation_is_reproducible(self, tanh_plant):
        policy = ExcitationPolicy(kind="uniform_random", length=50, seed=9)
        a, _ = generate_training_data(tanh_plant, policy)
        b, _ = generate_training_data(tanh_plant, policy)
        np.testing.assert_array_equal(a.omega, b.omega)


class TestReference:
    def test_constant_clamped_to_ball(self):
        ref = ReferenceSignal(kind="constant", n_x=2, r_bar=0.3, value=[0.5, -0.1])
        np.testing.assert_allclose(ref(0), [0.3, -0.1])
        np.testing.assert_allclose(ref.raw(0), [0.5, -0.1])

    def test_piecewise_switches(self):
        ref = ReferenceSignal(kind="piecewise", n_x=1, r_bar=1.0, value=[0.0],
                              segments=[(10, [0.2]), (20, [-0.2])])
        assert ref(5)[0] == 0.0 and ref(10)[0] == 0.2 and ref(25)[0] == -0.2

    def test_sinusoid(self):
        ref = ReferenceSignal(kind="sinusoid", n_x=1, r_bar=1.0, amplitude=[0.2], offset=[0.1], period=40)
        assert ref(10)[0] == pytest.approx(0.3)

    def test_l2_clamp_keeps_direction(self):
        ref = ReferenceSignal(kind="constant", n_x=2, r_bar=0.5, value=[0.6, 0.8], norm=Norm.L2)
        np.testing.assert_allclose(ref(0), [0.3, 0.4])


class TestClosedLoop:
    def test_validated_tuning_keeps_state_in_ball(self, tanh_plant, tanh_data, tanh_tuning):
        report = validate_theorem2_hypotheses(tanh_tuning, tanh_data, x0=[0.0], r_first=[0.2],
                                              x_box_radius=tanh_plant.state_radius)
        assert report.passed
        controller = DirectInverseController(tanh_data, tanh_tuning, KernelSpec(width=0.3)).train()
        reference = ReferenceSignal(kind="constant", n_x=1, r_bar=tanh_tuning.r_bar, value=[0.2])
        result = run_closed_loop(tanh_plant, controller, reference, horizon=80, x0=[0.0], seed=1)
        assert result.report.stable
        assert result.report.in_ball_fraction == 1.0
        assert result.report.empty_slab_count == 0
        assert result.report.steps_executed == 80
        assert list(result.trace.columns[:3]) == ["t", "x_1", "r_1"]
        assert not set(ESTIMATOR_COLUMNS) & set(result.trace.columns)
        assert result.summary["mode"] == "static"

    def test_adaptive_trace_has_estimates(self, tanh_plant, tanh_data, tanh_tuning):
        controller = DirectInverseController(tanh_data, tanh_tuning, KernelSpec(width=0.3), mode="adaptive").train()
        reference = ReferenceSignal(kind="constant", n_x=1, r_bar=tanh_tuning.r_bar, value=[0.1])
        result = run_closed_loop(tanh_plant, controller, reference, horizon=20, x0=[0.0], timing=True)
        for column in ESTIMATOR_COLUMNS + ["gamma_delta_t", "wallclock_us"]:
            assert column in result.trace.columns
        assert result.trace["delta_hat"].is_monotonic_increasing

    def test_adaptive_gamma_delta_stays_admissible(self, tanh_plant, tanh_data, tanh_tuning):
        controller = DirectInverseController(tanh_data, tanh_tuning, KernelSpec(width=0.3), mode="adaptive").train()
        reference = ReferenceSignal(kind="sinusoid", n_x=1, r_bar=tanh_tuning.r_bar,
                                    amplitude=[0.25], offset=[0.0], period=40)
        trace = run_closed_loop(tanh_plant, controller, reference, horizon=150, x0=[0.0], seed=3).trace
        cap = np.minimum(
            1.0 / ((trace["gamma_g_hat"] + tanh_tuning.c_gamma_g) * tanh_tuning.lambda2_star),
            tanh_tuning.gamma_delta_bar,
        )
        assert np.all(trace["gamma_delta_t"] > 0.0)
        assert np.all(trace["gamma_delta_t"] < cap)

    def test_strict_empty_slab_aborts_run(self, tanh_plant, tanh_data):
        params = TuningConfig(r_bar=0.3, samples=300, N_bar=100, sigma=0.0, gamma_delta=0.1)
        tuning, _ = design_tuning(tanh_data, params, x_cap=tanh_plant.state_radius)
        controller = DirectInverseController(tanh_data, tuning, KernelSpec(width=0.3))
        reference = ReferenceSignal(kind="constant", n_x=1, r_bar=0.3, value=[0.2])
        result = run_closed_loop(tanh_plant, controller, reference, horizon=10, x0=[0.0])
        assert result.report.aborted
        assert result.report.first_empty_slab_t == 0
        assert result.report.steps_executed == 0
        assert not result.report.stable

    def test_dimension_mismatch(self, tanh_data, tanh_tuning):
        controller = DirectInverseController(tanh_data, tanh_tuning, KernelSpec(width=0.3))
        reference = ReferenceSignal(kind="constant", n_x=2, r_bar=0.3, value=[0.0])
        with pytest.raises(ValueError):
            run_closed_loop(TwoStatePolynomialPlant(), controller, reference, horizon=5)


class TestGainFit:
    def test_recovers_window_gains(self):
        rng = np.random.default_rng(0)
        r = np.repeat(rng.uniform(0, 1, 20), 10)
        e = np.repeat(rng.uniform(0, 0.1, 20), 10)
        x = 1.3 * r + 0.7 * e + 0.05
        fit = fit_gains(x, r, e, window=10)
        assert fit.coefficients == pytest.approx([1.3, 0.7, 0.05], abs=1e-6)
        assert fit.dropped == []

    def test_offset_never_negative(self):
        rng = np.random.default_rng(1)
        r = np.repeat(rng.uniform(0.5, 1.0, 20), 10)
        e = np.repeat(rng.uniform(0, 0.1, 20), 10)
        x = 2.0 * r - 0.5 + 0.3 * e
        fit = fit_gains(x, r, e, window=10)
        assert all(c >= 0.0 for c in fit.coefficients)

    def test_constant_reference_folded_into_offset(self):
        rng = np.random.default_rng(2)
        r = np.full(200, 0.3)
        e = np.repeat(rng.uniform(0, 0.1, 20), 10)
        x = 0.7 * e + 0.4
        fit = fit_gains(x, r, e, window=10)
        assert fit.dropped == ["r"]
        assert fit.coefficients == pytest.approx([0.0, 0.7, 0.4], abs=1e-6)

    def test_sinusoid_reference_gives_bounded_gains(self, tanh_plant, tanh_data, tanh_tuning):
        controller = DirectInverseController(tanh_data, tanh_tuning, KernelSpec(width=0.3)).train()
        reference = ReferenceSignal(kind="sinusoid", n_x=1, r_bar=tanh_tuning.r_bar,
                                    amplitude=[0.3], offset=[0.0], period=150)
        result = run_closed_loop(tanh_plant, controller, reference, horizon=600, x0=[0.0], seed=0)
        lam1, lam2, beta = result.report.lambda_fit
        assert min(lam1, lam2, beta) >= 0.0
        assert lam1 * tanh_tuning.r_bar + beta <= 10 * result.report.sup_x + 1e-9

    def test_too_short_returns_none(self):
        assert fit_gains(np.ones(5), np.ones(5), np.ones(5), window=10) is None


class TestGammaOracle:
    def test_tanh_input_gain(self, tanh_plant):
        result = gamma_oracle(tanh_plant, grid_resolution=201, surrogate_samples=100)
        assert result.gamma_g == pytest.approx(1.0, rel=1e-3)
        assert result.gamma_star_surrogate > 0.0

    def test_linear_input_gain(self):
        result = gamma_oracle(LinearPlant(A=[[0.5]], B=[2.0]), grid_resolution=51, surrogate_samples=50)
        assert result.gamma_g == pytest.approx(2.0)

    def test_refining_grid_never_decreases(self):
        plant = TwoStatePolynomialPlant()
        values = [gamma_oracle(plant, grid_resolution=n, state_resolution=11, surrogate_samples=20).gamma_g
                  for n in (6, 11, 21, 41)]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))

    def test_expression_plant_unsupported(self):
        with pytest.raises(UnsupportedPlantError):
            gamma_oracle(ExpressionPlant(["0.5*x1 + u"]))


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    config = load_config(str(Path(__file__).parent / "configs" / "benchmark_scalar_tanh.json"))
    out_dir = tmp_path_factory.mktemp("benchmark")
    data, _ = generate(config, out_dir)
    tuning, passed = tune(config, data, out_dir)
    assert passed
    controller = DirectInverseController(data, tuning, KernelSpec(width=config.kernel.width)).train()
    return config, controller


class TestBenchmark:
    def test_seeded_runs_stay_in_ball(self, benchmark):
        config, trained = benchmark
        plant = build_plant(config.plant)
        reference = ReferenceSignal(kind="constant", n_x=1, r_bar=trained.tuning.r_bar, value=[0.2])
        for seed in range(20):
            result = run_closed_loop(plant, copy.deepcopy(trained), reference, horizon=2000, x0=[0.0], seed=seed)
            assert result.report.in_ball_fraction == 1.0, seed
            assert result.report.empty_slab_count == 0, seed
            assert result.report.robust_violations == 0, seed
            assert result.trace["robust_ok"].all(), seed
