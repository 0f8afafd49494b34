"""
Shared fixtures: a small scalar tanh benchmark and its designed tuning
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from app.schemas import TuningConfig
from app.services.plants import ExcitationPolicy, ScalarTanhPlant, generate_training_data
from app.services.set_membership import Norm, TrainingData
from app.services.tuning import design_tuning


@pytest.fixture
def tanh_plant():
    return ScalarTanhPlant(a=0.2, b=1.0, noise_bound=0.01, input_box=(-1.0, 1.0),
                           state_radius=1.5, norm=Norm.LINF)


@pytest.fixture
def tanh_data(tanh_plant):
    data, _ = generate_training_data(
        tanh_plant, ExcitationPolicy(kind="grid_sweep", length=600, grid_x=30, grid_u=20, seed=0)
    )
    return data


@pytest.fixture
def tuning_params():
    return TuningConfig(
        c_delta=0.01, c_gamma_star=0.3, c_gamma_g=0.2, c_epsilon=0.02,
        sigma_margin=1.2, r_bar=0.3, N_bar=200, samples=500,
    )


@pytest.fixture
def tanh_tuning(tanh_data, tuning_params, tanh_plant):
    tuning, _ = design_tuning(tanh_data, tuning_params, norm=Norm.LINF,
                              x_cap=tanh_plant.state_radius, seed=0)
    return tuning


@pytest.fixture
def line_data():
    """Noise-free samples of u = ω₂ − 0.5·ω₁ on a scalar state"""
    x = np.linspace(-1.0, 1.0, 21)
    x_next = 0.5 * x[::-1]
    u = x_next - 0.5 * x
    return TrainingData(t=np.arange(-21, 0), u=u, x=x, x_next=x_next)
