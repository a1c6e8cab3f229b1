"""Threshold calibration by simultaneous-perturbation stochastic approximation
on the credible-region boundary.

For a threshold xi, the calibrated level is the supremum of the test
statistic's p-value function over the boundary {theta : T(y, theta) = xi}.
The boundary is a smooth level-set submanifold wherever the statistic gradient
is nonzero, so the search runs as Riemannian stochastic gradient ascent: a
single Rademacher perturbation yields a finite-difference estimate of the
ambient p-value gradient from two simulated indicator evaluations, the
estimate is projected onto the tangent space, and the update is retracted back
onto the boundary along the ray through the MAP.  The calibrated level is the
running average of the two indicators already computed for the gradient.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from sklearn.isotonic import IsotonicRegression

from .map_fit import MapFit, find_map
from .model import (
    CrossProductData,
    FactorModelConfig,
    generate_data,
    posterior_value_and_grad,
    sample_standard_wishart,
)
from .statistics import ZERO_GRAD_TOL, StatisticKind, grad_stat, statistic

__all__ = [
    "TuningConstants",
    "CalibrationProblem",
    "CalibrationResult",
    "CalibrationCurve",
    "RayEscapeError",
    "MapFailure",
    "factor_problem",
    "rates",
    "tangent_project",
    "retract",
    "riem_grad_fd",
    "sprsa",
    "initial_boundary_point",
    "calibrate_curve",
    "calibrated_possibility",
]

BOUNDARY_TOL = 1e-6
RETRACT_TOL = 1e-8
SKIP_BUDGET = 0.05


class RayEscapeError(RuntimeError):
    """The retraction ray never reaches the target statistic level."""


class MapFailure(RuntimeError):
    """Inner MAP solve on simulated data did not converge."""


@dataclass(frozen=True)
class TuningConstants:
    """Decaying learning and finite-difference rates a_k, c_k.

    a_k = alpha / k^beta and c_k = gamma / k^delta.  The constraint
    beta in (delta + 1/2, 1] guarantees sum a_k = inf and
    sum a_k^2 / c_k^2 < inf, the condition for convergence to a local
    solution on the boundary manifold.
    """

    alpha: float = 0.1
    beta: float = 0.65
    gamma: float = 0.05
    delta: float = 0.149
    iterations: int = 50000

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 0:
            raise ValueError("alpha and gamma must be positive")
        if not 0.0 < self.delta < 0.5:
            raise ValueError("delta must lie in (0, .5)")
        if not self.delta + 0.5 < self.beta <= 1.0:
            raise ValueError(
                f"beta={self.beta} must lie in (delta + 1/2, 1] = "
                f"({self.delta + 0.5}, 1]"
            )
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")


def rates(k: int, tuning: TuningConstants) -> tuple[float, float]:
    """Learning rate a_k and FD rate c_k at iteration k >= 1."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    return tuning.alpha / k**tuning.beta, tuning.gamma / k**tuning.delta


@dataclass
class CalibrationProblem:
    """Bundle of model operations the calibrator needs.

    ``fit_fn(data, warm_start)`` must return an object with a ``theta_hat``
    attribute and raise :class:`MapFailure` when the solve is unusable.
    ``quadratic_rays`` declares that the statistic scales as x^2 along rays
    through the MAP, enabling the closed-form retraction.
    """

    statistic: Callable
    statistic_grad: Callable
    sample_u: Callable
    generate: Callable
    fit_fn: Callable
    quadratic_rays: bool = False


def factor_problem(kind: StatisticKind, config: FactorModelConfig, *,
                   loading_prior_sd: float | None = None) -> CalibrationProblem:
    """Calibration problem for the one-factor Wishart model."""
    kw = {"loading_prior_sd": loading_prior_sd}
    need_cov = kind == StatisticKind.WALD

    if kind == StatisticKind.WALD:
        def stat(data, fit, theta):
            diff = fit.theta_hat - np.asarray(theta, dtype=float)
            return float(diff @ np.linalg.solve(fit.sigma_theta_hat, diff))
    else:
        def stat(data, fit, theta):
            value, _ = posterior_value_and_grad(data, theta, want_grad=False, **kw)
            return -2.0 * (value - fit.log_post)

    if kind == StatisticKind.WALD:
        def stat_grad(data, fit, theta):
            diff = fit.theta_hat - np.asarray(theta, dtype=float)
            return -2.0 * np.linalg.solve(fit.sigma_theta_hat, diff)
    else:
        def stat_grad(data, fit, theta):
            _, grad = posterior_value_and_grad(data, theta, **kw)
            return -2.0 * grad

    def sample_u(rng):
        return sample_standard_wishart(config.m, config.dof, rng)

    def generate(u, theta):
        return generate_data(u, theta, config, validate=False)

    def fit_fn(data, warm_start=None):
        warm_cov = getattr(warm_start, "sigma_theta_hat", None)
        warm_theta = getattr(warm_start, "theta_hat", warm_start)
        fit = find_map(data, init=warm_theta, covariance=need_cov,
                       hinv0=warm_cov, **kw)
        if not fit.converged:
            raise MapFailure("MAP solve on simulated data did not converge")
        return fit

    return CalibrationProblem(
        statistic=stat,
        statistic_grad=stat_grad,
        sample_u=sample_u,
        generate=generate,
        fit_fn=fit_fn,
        quadratic_rays=kind == StatisticKind.WALD,
    )


# ---------------------------------------------------------------------------
# Manifold primitives
# ---------------------------------------------------------------------------


def tangent_project(v: np.ndarray, stat_grad: np.ndarray) -> np.ndarray:
    """Project v onto the null space of the statistic gradient."""
    g = np.asarray(stat_grad, dtype=float)
    denom = float(g @ g)
    if denom < ZERO_GRAD_TOL**2:
        raise ValueError("statistic gradient vanishes: non-regular boundary point")
    return v - g * (float(g @ v) / denom)


def retract(problem: CalibrationProblem, data, fit, theta: np.ndarray,
            h: np.ndarray, xi: float) -> np.ndarray:
    """Map theta + h back onto the boundary along the ray from the MAP.

    Solves T(y, theta_hat + x * (theta + h - theta_hat)) = xi for x > 0 and
    returns the ray point.  Satisfies the centering condition exactly when
    theta is already on the boundary and h = 0.
    """
    theta_hat = np.asarray(fit.theta_hat, dtype=float)
    d = np.asarray(theta, dtype=float) + np.asarray(h, dtype=float) - theta_hat
    if float(d @ d) == 0.0:
        raise ValueError("retraction ray is degenerate: theta + h equals the MAP")

    def stat_at(x):
        return problem.statistic(data, fit, theta_hat + x * d)

    if problem.quadratic_rays:
        t1 = stat_at(1.0)
        if t1 <= 0.0:
            raise RayEscapeError("statistic vanishes along the ray")
        x = np.sqrt(xi / t1)
        return theta_hat + x * d

    # bracket by doubling from x = 1, then solve on the bracket
    hi = 1.0
    f_hi = stat_at(hi) - xi
    doublings = 0
    while f_hi < 0.0:
        hi *= 2.0
        doublings += 1
        if doublings > 60:
            raise RayEscapeError("ray never reaches the target level")
        try:
            f_hi = stat_at(hi) - xi
        except np.linalg.LinAlgError:
            raise RayEscapeError("ray left the statistic's domain") from None
    if f_hi == 0.0:
        return theta_hat + hi * d
    lo = hi / 2.0 if hi > 1.0 else 0.0
    x = brentq(lambda t: stat_at(t) - xi, lo, hi, xtol=1e-12, maxiter=200)
    return theta_hat + x * d


# ---------------------------------------------------------------------------
# Stochastic gradient of the p-value function
# ---------------------------------------------------------------------------


def sp_indicator_pair(problem: CalibrationProblem, data, fit,
                      theta: np.ndarray, c: float, delta: np.ndarray,
                      u) -> tuple[bool, bool]:
    """The two perturbed survival indicators sharing one simulated draw u.

    Each side simulates data at the perturbed parameter, fits the MAP on the
    simulated data, and compares the simulated statistic value against the
    observed one at the same perturbed parameter.
    """
    out = []
    for sign in (1.0, -1.0):
        th = theta + sign * c * delta
        y_sim = problem.generate(u, th)
        fit_sim = problem.fit_fn(y_sim, fit)
        t_sim = problem.statistic(y_sim, fit_sim, th)
        t_obs = problem.statistic(data, fit, th)
        out.append(t_sim >= t_obs)
    return out[0], out[1]


def riem_grad_fd(problem: CalibrationProblem, data, fit, theta: np.ndarray,
                 xi: float, c: float, rng: np.random.Generator):
    """One noisy Riemannian gradient estimate of the p-value function.

    Returns ``(projected_gradient, (i_plus, i_minus), ambient_estimate)``.
    Raises :class:`MapFailure` if an inner MAP solve fails; the caller skips
    the iteration.
    """
    theta = np.asarray(theta, dtype=float)
    t0 = problem.statistic(data, fit, theta)
    if abs(t0 - xi) > BOUNDARY_TOL:
        raise ValueError(f"theta is off the boundary: |T - xi| = {abs(t0 - xi):.3g}")
    gt = problem.statistic_grad(data, fit, theta)
    if float(np.linalg.norm(gt)) < ZERO_GRAD_TOL:
        raise ValueError("statistic gradient vanishes: non-regular boundary point")

    delta = rng.integers(0, 2, size=theta.shape[0]) * 2.0 - 1.0
    u = problem.sample_u(rng)
    i_plus, i_minus = sp_indicator_pair(problem, data, fit, theta, c, delta, u)
    ambient = (float(i_plus) - float(i_minus)) / (2.0 * c * delta)
    return tangent_project(ambient, gt), (i_plus, i_minus), ambient


# ---------------------------------------------------------------------------
# The SPRSA driver
# ---------------------------------------------------------------------------


@dataclass
class CalibrationResult:
    xi: float
    alpha_hat_star: float
    theta_final: np.ndarray
    n_iterations: int
    n_skipped: int
    reliable: bool
    indicator_pairs: np.ndarray | None = field(default=None, repr=False)
    step_norms: np.ndarray | None = field(default=None, repr=False)
    boundary_residuals: np.ndarray | None = field(default=None, repr=False)

    def mc_se(self) -> float:
        """Naive MC standard error of the averaged estimate from the trace."""
        if self.indicator_pairs is None:
            raise ValueError("result was run without trace storage")
        means = self.indicator_pairs.mean(axis=1)
        n = len(means)
        if n < 2:
            return np.inf
        return float(means.std(ddof=1) / np.sqrt(n))


def sprsa(problem: CalibrationProblem, data, fit, xi: float,
          theta_init: np.ndarray, tuning: TuningConstants,
          rng: np.random.Generator, *, keep_trace: bool = True,
          discard: int = 0) -> CalibrationResult:
    """Run K iterations of boundary gradient ascent and average the indicators.

    ``discard`` drops that many leading iterations from the average (default
    keeps everything).  Iterations whose inner MAP solve fails keep the
    current iterate and are excluded from the average; a result with more
    than 5% skips is flagged unreliable.
    """
    if xi <= 0.0:
        raise ValueError("xi must be positive")
    theta = np.asarray(theta_init, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta_init has non-finite entries")
    theta = retract(problem, data, fit, theta, np.zeros_like(theta), xi)

    kk = tuning.iterations
    pairs = []
    step_norms = np.zeros(kk) if keep_trace else None
    residuals = np.zeros(kk) if keep_trace else None
    skipped = 0
    for k in range(1, kk + 1):
        a_k, c_k = rates(k, tuning)
        try:
            grad, pair, _ = riem_grad_fd(problem, data, fit, theta, xi, c_k, rng)
            step = a_k * grad
            try:
                theta = retract(problem, data, fit, theta, step, xi)
            except RayEscapeError:
                # shrink the step until the ray re-enters the level set
                for _ in range(30):
                    step *= 0.5
                    try:
                        theta = retract(problem, data, fit, theta, step, xi)
                        break
                    except RayEscapeError:
                        continue
            if k > discard:
                pairs.append(pair)
        except MapFailure:
            skipped += 1
            pair, step = None, np.zeros_like(theta)
        if keep_trace:
            step_norms[k - 1] = float(np.linalg.norm(step))
            residuals[k - 1] = abs(problem.statistic(data, fit, theta) - xi)

    pair_arr = np.asarray(pairs, dtype=float) if pairs else np.zeros((0, 2))
    alpha_hat = float(pair_arr.mean()) if len(pair_arr) else np.nan
    return CalibrationResult(
        xi=float(xi),
        alpha_hat_star=alpha_hat,
        theta_final=theta,
        n_iterations=kk,
        n_skipped=skipped,
        reliable=skipped <= SKIP_BUDGET * kk,
        indicator_pairs=pair_arr if keep_trace else None,
        step_norms=step_norms,
        boundary_residuals=residuals,
    )


def initial_boundary_point(problem: CalibrationProblem, data, fit, xi: float,
                           draws: np.ndarray) -> np.ndarray:
    """Posterior draw with statistic closest to xi, ray-retracted onto the boundary."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or len(draws) == 0:
        raise ValueError("draws must be a nonempty (n_draws, q) array")
    vals = np.array([problem.statistic(data, fit, d) for d in draws])
    usable = vals > 0.0
    if not usable.any():
        raise ValueError("all posterior draws sit at the MAP; boundary start undefined")
    idx = np.where(usable)[0][np.argmin(np.abs(vals[usable] - xi))]
    zero = np.zeros(draws.shape[1])
    return retract(problem, data, fit, draws[idx], zero, xi)


# ---------------------------------------------------------------------------
# Curves and contour evaluation
# ---------------------------------------------------------------------------


@dataclass
class CalibrationCurve:
    nominal_alphas: np.ndarray
    thresholds: np.ndarray
    calibrated_alphas: np.ndarray

    def __post_init__(self):
        self.nominal_alphas = np.asarray(self.nominal_alphas, dtype=float)
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self.calibrated_alphas = np.asarray(self.calibrated_alphas, dtype=float)
        if not (len(self.nominal_alphas) == len(self.thresholds)
                == len(self.calibrated_alphas)):
            raise ValueError("curve columns must have equal length")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("nominal_alpha,xi,calibrated_alpha\n")
        for a, x, c in zip(self.nominal_alphas, self.thresholds, self.calibrated_alphas):
            buf.write(f"{format(a, '.17g')},{format(x, '.17g')},{format(c, '.17g')}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CalibrationCurve":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if lines[0] != "nominal_alpha,xi,calibrated_alpha":
            raise ValueError("malformed calibration-curve CSV header")
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        return cls(rows[:, 0], rows[:, 1], rows[:, 2])

    def to_json(self) -> str:
        return json.dumps(
            {
                "nominal_alpha": self.nominal_alphas.tolist(),
                "xi": self.thresholds.tolist(),
                "calibrated_alpha": self.calibrated_alphas.tolist(),
            },
            separators=(",", ":"),
        )


def calibrate_curve(problem: CalibrationProblem, data, fit, draws: np.ndarray,
                    nominal_alphas, thresholds, tuning: TuningConstants,
                    rng: np.random.Generator, *,
                    keep_trace: bool = False) -> CalibrationCurve:
    """One SPRSA run per threshold; thresholds are the posterior quantiles
    matching the nominal levels (computed by the caller)."""
    nominal_alphas = np.asarray(nominal_alphas, dtype=float)
    thresholds = np.asarray(thresholds, dtype=float)
    streams = rng.spawn(len(thresholds))
    calibrated = np.empty(len(thresholds))
    for i, (xi, sub) in enumerate(zip(thresholds, streams)):
        start = initial_boundary_point(problem, data, fit, xi, draws)
        res = sprsa(problem, data, fit, xi, start, tuning, sub, keep_trace=keep_trace)
        calibrated[i] = res.alpha_hat_star
    return CalibrationCurve(nominal_alphas, thresholds, calibrated)


def calibrated_possibility(theta: np.ndarray, curve: CalibrationCurve,
                           problem: CalibrationProblem, data, fit, *,
                           exact: bool = False, draws: np.ndarray | None = None,
                           tuning: TuningConstants | None = None,
                           rng: np.random.Generator | None = None) -> float:
    """Calibrated contour value at theta.

    Interpolates the calibrated level in the statistic value using a monotone
    (isotonic, nonincreasing) smoothing of the curve; the statistic value 0
    (the MAP itself) maps to 1 by convention.  Values beyond the grid clamp to
    the curve extremes.  ``exact`` skips interpolation entirely and runs a
    fresh stochastic-approximation pass at the observed statistic value
    (requires draws, tuning, rng).
    """
    if len(curve.thresholds) == 0:
        raise ValueError("empty calibration curve")
    t = problem.statistic(data, fit, theta)
    if t <= 0.0:
        return 1.0
    if exact:
        if draws is None or tuning is None or rng is None:
            raise ValueError("exact mode needs draws, tuning, and rng")
        start = initial_boundary_point(problem, data, fit, t, draws)
        return sprsa(problem, data, fit, t, start, tuning, rng).alpha_hat_star
    order = np.argsort(curve.thresholds)
    xs = curve.thresholds[order]
    ys = curve.calibrated_alphas[order]
    iso = IsotonicRegression(increasing=False, out_of_bounds="clip")
    ys = iso.fit_transform(xs, ys)
    return float(np.interp(t, xs, ys))
