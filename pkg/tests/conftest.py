"""Shared fixtures: a moderate-size dataset with its MAP fit, reused by the
statistic, calibration, and acceptance tests (session scope keeps the MAP
solve from being repeated in every module)."""

import numpy as np
import pytest

from credcal.map_fit import find_map
from credcal.model import FactorModelConfig, generate_data, sample_standard_wishart


def scene_theta(psi, lam, upsilon):
    """Pack structural values (common variance, loadings, unique variances)
    into log-SD coordinates."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    upsilon = np.atleast_1d(np.asarray(upsilon, dtype=float))
    return np.concatenate((
        [0.5 * np.log(psi)], lam, 0.5 * np.log(upsilon)
    ))


@pytest.fixture(scope="session")
def m5_config():
    return FactorModelConfig(m=5, n=100)


@pytest.fixture(scope="session")
def m5_theta_true():
    # communality .5 everywhere: psi = .5, loadings 1, unique variances .5
    return scene_theta(0.5, np.ones(4), np.full(5, 0.5))


@pytest.fixture(scope="session")
def m5_data(m5_config, m5_theta_true):
    rng = np.random.default_rng(20240817)
    u = sample_standard_wishart(m5_config.m, m5_config.dof, rng)
    return generate_data(u, m5_theta_true, m5_config)


@pytest.fixture(scope="session")
def m5_fit(m5_data):
    fit = find_map(m5_data)
    assert fit.converged
    return fit
