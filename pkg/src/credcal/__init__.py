"""credcal: frequentist calibration of Bayesian credible regions for the
one-factor covariance-structure model."""

__version__ = "0.1.0"

from .calibrate import (
    CalibrationCurve,
    CalibrationProblem,
    CalibrationResult,
    TuningConstants,
    calibrate_curve,
    calibrated_possibility,
    factor_problem,
    initial_boundary_point,
    retract,
    riem_grad_fd,
    sprsa,
)
from .estimator import CredibleRegionCalibrator
from .experiment import (
    EdfSummary,
    ReplicationRecord,
    Scene,
    SceneSpec,
    edf_summary,
    generate_scene_theta,
    original_contour,
    run_experiment,
    run_replication,
)
from .map_fit import MapFit, default_init, find_map
from .mcmc import McmcConfig, PosteriorDraws, ess, psrf, run_mcmc, sample_chains
from .model import (
    CrossProductData,
    FactorModelConfig,
    expected_hessian_log_posterior,
    generate_data,
    grad_log_posterior,
    log_likelihood,
    log_posterior,
    log_prior,
    sample_standard_wishart,
    sigma_of_theta,
)
from .statistics import (
    StatisticKind,
    grad_stat,
    pdr_stat,
    posterior_quantile_thresholds,
    region_contains,
    statistic,
    wald_stat,
)

__all__ = [
    "CalibrationCurve",
    "CalibrationProblem",
    "CalibrationResult",
    "CredibleRegionCalibrator",
    "CrossProductData",
    "EdfSummary",
    "FactorModelConfig",
    "MapFit",
    "McmcConfig",
    "PosteriorDraws",
    "ReplicationRecord",
    "Scene",
    "SceneSpec",
    "StatisticKind",
    "TuningConstants",
    "calibrate_curve",
    "calibrated_possibility",
    "default_init",
    "edf_summary",
    "ess",
    "expected_hessian_log_posterior",
    "factor_problem",
    "find_map",
    "generate_data",
    "generate_scene_theta",
    "grad_log_posterior",
    "grad_stat",
    "initial_boundary_point",
    "log_likelihood",
    "log_posterior",
    "log_prior",
    "original_contour",
    "pdr_stat",
    "posterior_quantile_thresholds",
    "psrf",
    "region_contains",
    "retract",
    "riem_grad_fd",
    "run_experiment",
    "run_mcmc",
    "run_replication",
    "sample_chains",
    "sample_standard_wishart",
    "sigma_of_theta",
    "sprsa",
    "statistic",
    "wald_stat",
]
