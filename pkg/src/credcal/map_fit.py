"""MAP estimation for the one-factor model.

The optimizer is BFGS ascent with backtracking line search on the exact log
posterior, seeded with the inverse expected Hessian at the starting point.
The expected Hessian at the solution supplies the covariance estimate of the
MAP estimator consumed by the Wald statistic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import (
    CrossProductData,
    expected_hessian_log_posterior,
    posterior_value_and_grad,
)

__all__ = ["MapFit", "default_init", "find_map"]

GRAD_TOL = 1e-6
MAX_ITER = 500


@dataclass
class MapFit:
    """MAP point with the expected-Hessian covariance estimate."""

    theta_hat: np.ndarray
    neg_expected_hessian: np.ndarray
    sigma_theta_hat: np.ndarray
    converged: bool
    grad_norm: float
    log_post: float
    ridge_repaired: bool = False
    iterations: int = 0
    trace_log_post: list = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "theta_hat": self.theta_hat.tolist(),
                "neg_expected_hessian": self.neg_expected_hessian.tolist(),
                "sigma_theta_hat": self.sigma_theta_hat.tolist(),
                "converged": bool(self.converged),
                "grad_norm": float(self.grad_norm),
                "log_post": float(self.log_post),
                "ridge_repaired": bool(self.ridge_repaired),
                "iterations": int(self.iterations),
            },
            separators=(",", ":"),
        )


def default_init(data: CrossProductData) -> np.ndarray:
    """Moment-based starting values.

    psi_0 is half the first diagonal of y/dof, loadings start at 1, and the
    unique variances come from the residual diagonals floored at 1e-3.
    """
    m = data.m
    s = data.y / data.dof
    psi0 = 0.5 * s[0, 0]
    lam0 = np.ones(m - 1)
    resid = np.maximum(np.diag(s) - psi0, 1e-3)
    return np.concatenate(([0.5 * np.log(psi0)], lam0, 0.5 * np.log(resid)))


def _chol_with_ridge(mat: np.ndarray):
    """Cholesky of mat, adding an escalating ridge if it is not PD."""
    eps = 0.0
    for _ in range(12):
        try:
            c = np.linalg.cholesky(mat + eps * np.eye(mat.shape[0]))
            return c, eps
        except np.linalg.LinAlgError:
            eps = 1e-8 if eps == 0.0 else eps * 10.0
    raise np.linalg.LinAlgError("could not repair matrix to positive definite")


def find_map(data: CrossProductData, init: np.ndarray | None = None, *,
             loading_prior_sd: float | None = None,
             grad_tol: float = GRAD_TOL, max_iter: int = MAX_ITER,
             keep_trace: bool = False, hinv0: np.ndarray | None = None,
             covariance: bool = True) -> MapFit:
    """Maximize the log posterior from ``init`` (default: moment start).

    Non-convergence after ``max_iter`` iterations yields a flagged fit rather
    than an exception; a non-PD negative expected Hessian at the solution is
    ridge-repaired and flagged.  ``hinv0`` seeds the inverse-curvature model
    (useful for warm starts); ``covariance=False`` skips the expected-Hessian
    covariance at the solution when only the MAP point is needed.
    """
    if init is None:
        init = default_init(data)
    theta = np.asarray(init, dtype=float).copy()
    if not np.all(np.isfinite(theta)):
        raise ValueError("initial theta has non-finite entries")

    kw = {"loading_prior_sd": loading_prior_sd}
    q = len(theta)
    f, grad = posterior_value_and_grad(data, theta, **kw)
    trace = [f] if keep_trace else []

    # inverse-Hessian seed from the expected Hessian at the start
    if hinv0 is not None:
        hinv = np.asarray(hinv0, dtype=float).copy()
    else:
        neg_h0 = -expected_hessian_log_posterior(data, theta, **kw)
        try:
            c, _ = _chol_with_ridge(neg_h0)
            hinv = np.linalg.solve(c.T, np.linalg.solve(c, np.eye(q)))
        except np.linalg.LinAlgError:
            hinv = np.eye(q)

    converged = False
    it = 0
    eye = np.eye(q)
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= grad_tol:
            converged = True
            break
        direction = hinv @ grad
        slope = float(grad @ direction)
        if slope <= 0:  # curvature model failed; reset to plain ascent
            hinv = eye / max(gnorm, 1.0)
            direction = hinv @ grad
            slope = float(grad @ direction)
        if slope < 8.0 * np.finfo(float).eps * (1.0 + abs(f)):
            # objective improvements are below float resolution; finish by
            # driving the gradient norm down with full quasi-Newton steps
            improved = False
            for _ in range(20):
                cand = theta + hinv @ grad
                try:
                    f_cand, g_cand = posterior_value_and_grad(data, cand, **kw)
                except np.linalg.LinAlgError:
                    break
                if float(np.linalg.norm(g_cand)) >= float(np.linalg.norm(grad)):
                    break
                theta, f, grad = cand, f_cand, g_cand
                improved = True
                if float(np.linalg.norm(grad)) <= grad_tol:
                    break
            if not improved:
                break
            continue
        step = 1.0
        accepted = False
        for _ in range(60):
            cand = theta + step * direction
            try:
                f_cand, g_cand = posterior_value_and_grad(data, cand, **kw)
            except np.linalg.LinAlgError:
                f_cand, g_cand = -np.inf, None
            if np.isfinite(f_cand) and f_cand >= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s = cand - theta
        yv = grad - g_cand  # gradient change of the negated objective
        sy = float(s @ yv)
        if sy > 1e-12:  # BFGS update of the inverse curvature
            rho = 1.0 / sy
            v = eye - rho * np.outer(s, yv)
            hinv = v @ hinv @ v.T + rho * np.outer(s, s)
        theta, f, grad = cand, f_cand, g_cand
        if keep_trace:
            trace.append(f)
    gnorm = float(np.linalg.norm(grad))
    converged = converged or gnorm <= grad_tol

    if covariance:
        neg_h = -expected_hessian_log_posterior(data, theta, **kw)
        c, eps = _chol_with_ridge(neg_h)
        if eps > 0.0:
            neg_h = neg_h + eps * np.eye(neg_h.shape[0])
        cov = np.linalg.solve(c.T, np.linalg.solve(c, np.eye(neg_h.shape[0])))
        cov = 0.5 * (cov + cov.T)
    else:
        neg_h = np.empty((0, 0))
        cov = np.empty((0, 0))
        eps = 0.0
    return MapFit(
        theta_hat=theta,
        neg_expected_hessian=neg_h,
        sigma_theta_hat=cov,
        converged=converged,
        grad_norm=gnorm,
        log_post=f,
        ridge_repaired=eps > 0.0,
        iterations=it,
        trace_log_post=trace,
    )
