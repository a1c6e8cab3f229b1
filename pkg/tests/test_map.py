"""MAP estimator tests: stationarity, consistency at large dof, multi-start
agreement, initializer behavior, covariance properties."""

import json

import numpy as np
import pytest

from credcal.map_fit import default_init, find_map
from credcal.model import (
    CrossProductData,
    FactorModelConfig,
    generate_data,
    grad_log_posterior,
    sample_standard_wishart,
)
from conftest import scene_theta


def test_gradient_norm_at_solution(m5_fit, m5_data):
    assert m5_fit.converged
    assert m5_fit.grad_norm <= 1e-6
    # recompute independently of the stored value
    g = grad_log_posterior(m5_data, m5_fit.theta_hat)
    assert np.linalg.norm(g) <= 1e-6


def test_restart_is_fixed_point(m5_data, m5_fit):
    again = find_map(m5_data, init=m5_fit.theta_hat)
    assert np.max(np.abs(again.theta_hat - m5_fit.theta_hat)) <= 1e-8


def test_consistency_at_large_dof():
    # high-communality truth, dof = 9999: the posterior concentrates and the
    # MAP lands near the generating parameters
    cfg = FactorModelConfig(m=5, n=10000)
    truth = scene_theta(0.7, np.ones(4), np.full(5, 0.3))
    u = sample_standard_wishart(cfg.m, cfg.dof, np.random.default_rng(7))
    data = generate_data(u, truth, cfg)
    fit = find_map(data)
    assert fit.converged
    assert np.max(np.abs(fit.theta_hat - truth)) < 5e-2


def test_default_init_identity_data():
    data = CrossProductData(y=99.0 * np.eye(5), dof=99)
    init = default_init(data)
    assert init[0] == pytest.approx(0.5 * np.log(0.5))
    assert np.array_equal(init[1:5], np.ones(4))
    assert np.allclose(init[5:], 0.5 * np.log(0.5))


def test_default_init_finite_for_spd_data():
    rng = np.random.default_rng(13)
    for _ in range(50):
        a = rng.standard_normal((5, 7))
        data = CrossProductData(y=a @ a.T + 0.1 * np.eye(5), dof=99)
        assert np.all(np.isfinite(default_init(data)))


def test_trace_is_nondecreasing(m5_data):
    fit = find_map(m5_data, keep_trace=True)
    trace = np.asarray(fit.trace_log_post)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) >= 0)


def test_covariance_symmetric_pd(m5_fit):
    cov = m5_fit.sigma_theta_hat
    assert np.max(np.abs(cov - cov.T)) < 1e-12
    assert np.linalg.eigvalsh(cov).min() > 0
    # inverse relation with the negative expected Hessian
    assert np.allclose(cov @ m5_fit.neg_expected_hessian, np.eye(10), atol=1e-8)


def test_multi_start_agreement():
    cfg = FactorModelConfig(m=5, n=100)
    truth = scene_theta(0.5, np.ones(4), np.full(5, 0.5))
    rng = np.random.default_rng(17)
    agree = 0
    n_data = 200
    for _ in range(n_data):
        u = sample_standard_wishart(cfg.m, cfg.dof, rng)
        data = generate_data(u, truth, cfg, validate=False)
        base = find_map(data, covariance=False)
        init0 = default_init(data)
        ok = base.converged
        for _ in range(5):
            pert = init0 + 0.25 * rng.standard_normal(10)
            alt = find_map(data, init=pert, covariance=False)
            ok = ok and alt.converged and abs(alt.log_post - base.log_post) < 1e-6
        agree += ok
    assert agree >= 0.95 * n_data


def test_nonconvergent_fit_is_flagged_not_fatal(m5_data):
    fit = find_map(m5_data, max_iter=1, init=default_init(m5_data) + 1.0)
    assert not fit.converged
    assert fit.grad_norm > 1e-6


def test_rejects_nonfinite_init(m5_data):
    with pytest.raises(ValueError):
        find_map(m5_data, init=np.full(10, np.nan))


def test_mapfit_json_fields(m5_fit):
    obj = json.loads(m5_fit.to_json())
    assert obj["converged"] is True
    assert len(obj["theta_hat"]) == 10
    assert len(obj["sigma_theta_hat"]) == 10
