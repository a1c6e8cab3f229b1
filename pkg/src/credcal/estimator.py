"""Scikit-learn style front end for calibrated possibility contours."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .calibrate import TuningConstants, calibrate_curve, calibrated_possibility, factor_problem
from .map_fit import find_map
from .mcmc import McmcConfig, run_mcmc
from .model import CrossProductData, FactorModelConfig
from .statistics import StatisticKind, posterior_quantile_thresholds, statistic

__all__ = ["CredibleRegionCalibrator"]

DEFAULT_ALPHA_GRID = tuple(np.round(np.arange(0.05, 0.96, 0.05), 2))


class CredibleRegionCalibrator(BaseEstimator):
    """Calibrate credible regions of the one-factor model to frequentist validity.

    ``fit`` takes the observed m x m cross-product matrix (with its Wishart
    degrees of freedom) and runs the full pipeline: MAP estimation, posterior
    sampling, posterior quantile thresholds at the nominal levels, and one
    stochastic-approximation calibration run per threshold.  ``transform``
    then evaluates the calibrated possibility contour at parameter vectors.

    Parameters
    ----------
    statistic : {"wald", "pdr"}
        Test statistic generating the nested regions (elliptical or HPD).
    nominal_alphas : sequence of float
        Nominal levels whose posterior quantiles become the threshold grid.
    iterations : int
        Stochastic-approximation iterations per threshold.
    rate_alpha, rate_beta, rate_gamma, rate_delta : float
        Tuning constants of the decaying learning and FD rate sequences.
    chains, adapt_iters, burnin_iters, retain_iters, thin : int
        Posterior sampler schedule.
    loading_prior_sd : float or None
        None uses the improper uniform loading prior; a value switches to the
        diffuse zero-mean normal surrogate with that SD.
    seed : int
        Master seed; the run is deterministic given it.
    """

    def __init__(self, statistic="pdr", nominal_alphas=DEFAULT_ALPHA_GRID,
                 iterations=50000, rate_alpha=0.1, rate_beta=0.65,
                 rate_gamma=0.05, rate_delta=0.149, chains=5, adapt_iters=1000,
                 burnin_iters=10000, retain_iters=10000, thin=10,
                 loading_prior_sd=None, seed=0):
        self.statistic = statistic
        self.nominal_alphas = nominal_alphas
        self.iterations = iterations
        self.rate_alpha = rate_alpha
        self.rate_beta = rate_beta
        self.rate_gamma = rate_gamma
        self.rate_delta = rate_delta
        self.chains = chains
        self.adapt_iters = adapt_iters
        self.burnin_iters = burnin_iters
        self.retain_iters = retain_iters
        self.thin = thin
        self.loading_prior_sd = loading_prior_sd
        self.seed = seed

    def _tuning(self) -> TuningConstants:
        return TuningConstants(
            alpha=self.rate_alpha, beta=self.rate_beta,
            gamma=self.rate_gamma, delta=self.rate_delta,
            iterations=self.iterations,
        )

    def fit(self, X, y=None, *, dof=None):
        """Fit on the observed cross-product matrix.

        ``X`` is the m x m cross-product matrix (or a CrossProductData, in
        which case ``dof`` is taken from it).
        """
        if isinstance(X, CrossProductData):
            data = X
        else:
            X = check_array(X)
            if dof is None:
                raise ValueError("dof is required when X is a plain matrix")
            data = CrossProductData(y=np.asarray(X, dtype=float), dof=int(dof))
        kind = StatisticKind(self.statistic)
        config = FactorModelConfig(m=data.m, n=data.dof + 1)
        kw = {"loading_prior_sd": self.loading_prior_sd}

        self.map_fit_ = find_map(data, **kw)
        mcmc_config = McmcConfig(
            chains=self.chains, adapt_iters=self.adapt_iters,
            burnin_iters=self.burnin_iters, retain_iters=self.retain_iters,
            thin=self.thin, seed=self.seed,
        )
        self.draws_ = run_mcmc(data, mcmc_config, init=self.map_fit_.theta_hat,
                               proposal_cov=self.map_fit_.sigma_theta_hat, **kw)
        alphas = np.asarray(self.nominal_alphas, dtype=float)
        thresholds = posterior_quantile_thresholds(
            self.draws_.draws, kind, data, self.map_fit_, alphas, **kw
        )
        self.problem_ = factor_problem(kind, config, **kw)
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0xCA11)))
        self.curve_ = calibrate_curve(
            self.problem_, data, self.map_fit_, self.draws_.draws,
            alphas, thresholds, self._tuning(), rng,
        )
        self.data_ = data
        self.n_features_in_ = data.m
        return self

    def transform(self, theta):
        """Calibrated possibility contour at each parameter vector (row)."""
        check_is_fitted(self, "curve_")
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        return np.array([
            calibrated_possibility(t, self.curve_, self.problem_,
                                   self.data_, self.map_fit_)
            for t in theta
        ])

    def predict(self, theta):
        return self.transform(theta)

    def statistic_values(self, theta):
        """Raw test-statistic values at each parameter vector (row)."""
        check_is_fitted(self, "map_fit_")
        kind = StatisticKind(self.statistic)
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        return np.array([
            statistic(kind, self.data_, self.map_fit_, t,
                      loading_prior_sd=self.loading_prior_sd)
            for t in theta
        ])
