import numpy as np
import pytest

from dualmpc import UnicycleParams, make_unicycle_problem


def standard_unicycle_params(horizon=10, dt=0.3, process_std=0.02, measurement_std=0.01,
                             u_max=2.0, smoothing_eps=1e-2, **kwargs):
    """The unicycle instance used throughout the tests (mirrors the shipped
    example configuration)."""
    return UnicycleParams(
        dt=dt,
        horizon=horizon,
        process_noise_cov=process_std**2 * dt * np.eye(3),
        measurement_noise_cov=measurement_std**2 * np.eye(3),
        u_max=np.array([u_max, u_max]),
        smoothing_eps=smoothing_eps,
        **kwargs,
    )


@pytest.fixture
def unicycle_problem():
    return make_unicycle_problem(standard_unicycle_params())


def random_spd(rng, n, scale=1.0):
    M = rng.normal(size=(n, n))
    return scale * (M @ M.T + 0.1 * np.eye(n))
