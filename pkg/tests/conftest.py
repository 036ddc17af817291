import numpy as np
import pytest

from heki import kernels
from heki._accel import AVAILABLE_BACKENDS
from heki.forward_problem import InverseProblem, generate_data, section5_problem
from heki.gaussian_field import Grid1D, HyperParams, spde_sample


@pytest.fixture(params=AVAILABLE_BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    monkeypatch.setattr(kernels, "BACKEND", request.param)
    return request.param


@pytest.fixture
def grid():
    return Grid1D()


@pytest.fixture
def problem(grid):
    op, gamma = section5_problem(grid)
    rng = np.random.default_rng(123)
    truth = spde_sample(HyperParams(ell=37.0), grid, rng)
    return InverseProblem.from_data(op, generate_data(op, truth, gamma, rng), grid)


@pytest.fixture
def unit_problem(grid):
    """Same forward map with unit noise, so flows stay well conditioned."""
    op, _ = section5_problem(grid)
    rng = np.random.default_rng(7)
    truth = spde_sample(HyperParams(ell=37.0), grid, rng)
    return InverseProblem.from_data(op, generate_data(op, truth, np.eye(op.n_obs), rng), grid)
