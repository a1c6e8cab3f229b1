"""Wald and posterior-density-ratio test statistics and region utilities."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .map_fit import MapFit
from .model import CrossProductData, grad_log_posterior, posterior_value_and_grad

__all__ = [
    "StatisticKind",
    "wald_stat",
    "pdr_stat",
    "statistic",
    "grad_stat",
    "region_contains",
    "posterior_quantile_thresholds",
]

ZERO_GRAD_TOL = 1e-10


class StatisticKind(str, Enum):
    """Which test statistic indexes the nested credible regions."""

    WALD = "wald"
    PDR = "pdr"


def wald_stat(fit: MapFit, theta: np.ndarray) -> float:
    """Quadratic form (theta_hat - theta)' SigmaHat^{-1} (theta_hat - theta)."""
    diff = fit.theta_hat - np.asarray(theta, dtype=float)
    val = float(diff @ np.linalg.solve(fit.sigma_theta_hat, diff))
    return val


def pdr_stat(data: CrossProductData, fit: MapFit, theta: np.ndarray, *,
             loading_prior_sd: float | None = None) -> float:
    """-2 log posterior-density ratio to the MAP; >= 0 up to numerical slack."""
    lp, _ = posterior_value_and_grad(
        data, theta, loading_prior_sd=loading_prior_sd, want_grad=False
    )
    return -2.0 * (lp - fit.log_post)


def statistic(kind: StatisticKind, data: CrossProductData, fit: MapFit,
              theta: np.ndarray, *, loading_prior_sd: float | None = None) -> float:
    if kind == StatisticKind.WALD:
        return wald_stat(fit, theta)
    return pdr_stat(data, fit, theta, loading_prior_sd=loading_prior_sd)


def grad_stat(kind: StatisticKind, data: CrossProductData, fit: MapFit,
              theta: np.ndarray, *, loading_prior_sd: float | None = None) -> np.ndarray:
    """Gradient of the statistic in theta.

    Wald: -2 SigmaHat^{-1} (theta_hat - theta).  PDR: -2 grad log posterior.
    """
    theta = np.asarray(theta, dtype=float)
    if kind == StatisticKind.WALD:
        diff = fit.theta_hat - theta
        return -2.0 * np.linalg.solve(fit.sigma_theta_hat, diff)
    return -2.0 * grad_log_posterior(data, theta, loading_prior_sd=loading_prior_sd)


def is_regular_point(grad: np.ndarray) -> bool:
    """False where the statistic gradient vanishes (non-regular level point)."""
    return float(np.linalg.norm(grad)) >= ZERO_GRAD_TOL


def region_contains(kind: StatisticKind, data: CrossProductData, fit: MapFit,
                    theta: np.ndarray, xi: float, *,
                    loading_prior_sd: float | None = None) -> bool:
    """True iff theta lies in the credible region at threshold xi."""
    if xi < 0:
        raise ValueError("threshold xi must be nonnegative")
    return statistic(kind, data, fit, theta, loading_prior_sd=loading_prior_sd) <= xi


def posterior_quantile_thresholds(draws: np.ndarray, kind: StatisticKind,
                                  data: CrossProductData, fit: MapFit,
                                  alphas, *,
                                  loading_prior_sd: float | None = None) -> np.ndarray:
    """Empirical (1 - alpha) posterior quantiles of the statistic per alpha.

    ``draws`` is an (n_draws, q) array of posterior draws.  Linear
    interpolation of order statistics (type-7) is used; the returned
    thresholds are nonincreasing in alpha.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[0] == 0:
        raise ValueError("draws must be a nonempty (n_draws, q) array")
    alphas = np.asarray(alphas, dtype=float)
    if np.any((alphas <= 0) | (alphas >= 1)):
        raise ValueError("alphas must lie in (0, 1)")
    vals = np.array([
        statistic(kind, data, fit, d, loading_prior_sd=loading_prior_sd)
        for d in draws
    ])
    return np.quantile(vals, 1.0 - alphas)
