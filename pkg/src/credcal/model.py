"""One-factor covariance-structure model on cross-product data.

The observed data is the m x m cross-product matrix Y ~ Wishart(Sigma(theta), n - 1)
with the factor-analytic covariance structure

    Sigma(theta) = psi * lambda lambda' + Diag(upsilon),

where lambda_1 is fixed at 1 for identification.  All variance parameters are
carried on the log-SD scale, so the free parameter vector is

    theta = (zeta, lambda_2, ..., lambda_m, omega_1, ..., omega_m),

with psi = exp(2 zeta) and upsilon_j = exp(2 omega_j); its length is q = 2m.

This module provides the density pieces (Wishart likelihood, inverse-gamma
prior on the variance scale, their sum), their analytical first derivatives,
the expected Hessian under the Wishart mean, and the forward data generator
built on a Bartlett-decomposition standard-Wishart sampler.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "FactorModelConfig",
    "CrossProductData",
    "pack_theta",
    "unpack_theta",
    "sigma_of_theta",
    "sigma_derivatives",
    "log_likelihood",
    "log_prior",
    "grad_log_prior",
    "log_posterior",
    "grad_log_posterior",
    "expected_hessian_log_posterior",
    "sample_standard_wishart",
    "generate_data",
]

# Shape/scale of the inverse-gamma prior on each variance (common and unique).
IG_SHAPE = 1.0
IG_SCALE = 2.0

_SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class FactorModelConfig:
    """Model dimensions: m response variables, sample size n.

    Requires m >= 3 (one-factor identification) and n - 1 >= m so the
    Wishart data distribution is nondegenerate.
    """

    m: int
    n: int

    def __post_init__(self):
        if self.m < 3:
            raise ValueError(f"need m >= 3 for identification, got m={self.m}")
        if self.n - 1 < self.m:
            raise ValueError(f"need n - 1 >= m, got n={self.n}, m={self.m}")

    @property
    def q(self) -> int:
        """Number of free parameters, 2m."""
        return 2 * self.m

    @property
    def dof(self) -> int:
        return self.n - 1


@dataclass(frozen=True)
class CrossProductData:
    """Observed cross-product matrix with its Wishart degrees of freedom."""

    y: np.ndarray
    dof: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "y", y)
        if y.ndim != 2 or y.shape[0] != y.shape[1]:
            raise ValueError(f"y must be square, got shape {y.shape}")
        if not np.all(np.abs(y - y.T) <= _SYMMETRY_TOL * max(1.0, np.abs(y).max())):
            raise ValueError("y is not symmetric within tolerance")
        if np.linalg.eigvalsh(y).min() <= 0:
            raise ValueError("y is not positive definite")
        if self.dof < y.shape[0]:
            raise ValueError(f"dof={self.dof} < m={y.shape[0]}")

    @property
    def m(self) -> int:
        return self.y.shape[0]

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {"m": self.m, "dof": int(self.dof), "y": self.y.tolist()},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "CrossProductData":
        obj = json.loads(text)
        y = np.asarray(obj["y"], dtype=float)
        if y.shape != (obj["m"], obj["m"]):
            raise ValueError("JSON matrix shape disagrees with m")
        return cls(y=y, dof=int(obj["dof"]))

    def to_csv(self) -> str:
        """Row-major CSV: header line ``m,dof``, the two values, then m rows."""
        buf = io.StringIO()
        buf.write("m,dof\n")
        buf.write(f"{self.m},{self.dof}\n")
        for row in self.y:
            buf.write(",".join(_fmt(v) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CrossProductData":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "m,dof":
            raise ValueError("malformed cross-product CSV: missing 'm,dof' header")
        m_str, dof_str = lines[1].split(",")
        m, dof = int(m_str), int(dof_str)
        rows = [[float(v) for v in ln.split(",")] for ln in lines[2 : 2 + m]]
        y = np.asarray(rows, dtype=float)
        if y.shape != (m, m):
            raise ValueError("malformed cross-product CSV: wrong matrix shape")
        return cls(y=y, dof=dof)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# Parameter bookkeeping
# ---------------------------------------------------------------------------


def pack_theta(zeta: float, loadings: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """Assemble theta = (zeta, lambda_2..lambda_m, omega_1..omega_m)."""
    loadings = np.atleast_1d(np.asarray(loadings, dtype=float))
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
    if len(loadings) != len(omegas) - 1:
        raise ValueError("need m - 1 free loadings and m omegas")
    return np.concatenate(([zeta], loadings, omegas))


def unpack_theta(theta: np.ndarray, config: FactorModelConfig):
    """Split theta into (zeta, full loading vector with lambda_1 = 1, omegas)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (config.q,):
        raise ValueError(f"theta has length {theta.shape}, expected ({config.q},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta has non-finite entries")
    m = config.m
    zeta = theta[0]
    lam = np.concatenate(([1.0], theta[1:m]))
    omegas = theta[m:]
    return zeta, lam, omegas


# ---------------------------------------------------------------------------
# Covariance structure
# ---------------------------------------------------------------------------


def sigma_of_theta(theta: np.ndarray, config: FactorModelConfig) -> np.ndarray:
    """Implied covariance psi * lam lam' + Diag(upsilon)."""
    zeta, lam, omegas = unpack_theta(theta, config)
    psi = math.exp(2.0 * zeta)
    upsilon = np.exp(2.0 * omegas)
    return psi * np.outer(lam, lam) + np.diag(upsilon)


def sigma_derivatives(theta: np.ndarray, config: FactorModelConfig) -> np.ndarray:
    """Stack of partial derivatives dSigma/dtheta_r, shape (q, m, m)."""
    zeta, lam, omegas = unpack_theta(theta, config)
    m, q = config.m, config.q
    psi = math.exp(2.0 * zeta)
    upsilon = np.exp(2.0 * omegas)
    d = np.zeros((q, m, m))
    outer = np.outer(lam, lam)
    d[0] = 2.0 * psi * outer
    for j in range(1, m):  # free loading lambda_{j+1}
        dmat = np.zeros((m, m))
        dmat[j, :] = lam
        dmat[:, j] += lam
        d[j] = psi * dmat
    for j in range(m):
        d[m + j, j, j] = 2.0 * upsilon[j]
    return d


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def _chol_sigma(theta: np.ndarray, config: FactorModelConfig):
    sigma = sigma_of_theta(theta, config)
    try:
        c, lower = cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises its own
        raise np.linalg.LinAlgError("implied covariance is numerically singular") from exc
    return sigma, (c, lower)


def log_likelihood(data: CrossProductData, theta: np.ndarray) -> float:
    """Wishart log-density of the cross-product matrix, up to a theta-free constant.

    Returns -(dof/2) log|Sigma| - tr(Sigma^{-1} y) / 2.
    """
    config = FactorModelConfig(m=data.m, n=data.dof + 1)
    _, cf = _chol_sigma(theta, config)
    c = cf[0]
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    trace = float(np.trace(cho_solve(cf, data.y)))
    return -0.5 * data.dof * logdet - 0.5 * trace


def _ig_log_density_logsd(w: np.ndarray) -> np.ndarray:
    """Log density of an IG(IG_SHAPE, IG_SCALE) variance at v = exp(2w), in w.

    Includes the change-of-variables Jacobian |dv/dw| = 2 exp(2w) and the full
    normalizing constant, so exp of the result integrates to 1 over w.
    """
    a, b = IG_SHAPE, IG_SCALE
    const = a * math.log(b) - math.lgamma(a)
    return const + math.log(2.0) - 2.0 * a * w - b * np.exp(-2.0 * w)


def log_prior(theta: np.ndarray, config: FactorModelConfig, *,
              loading_prior_sd: float | None = None) -> float:
    """Log prior on the log-SD scale: IG(1, 2) on each variance, flat loadings.

    ``loading_prior_sd`` switches the improper uniform loading prior to a
    zero-mean normal with that SD (the diffuse-normal replication surrogate).
    """
    theta = np.asarray(theta, dtype=float)
    zeta, lam, omegas = unpack_theta(theta, config)
    w = np.concatenate(([zeta], omegas))
    out = float(np.sum(_ig_log_density_logsd(w)))
    if loading_prior_sd is not None:
        free = lam[1:]
        out += float(
            -0.5 * np.sum(free**2) / loading_prior_sd**2
            - (config.m - 1) * (0.5 * math.log(2.0 * math.pi) + math.log(loading_prior_sd))
        )
    return out


def grad_log_prior(theta: np.ndarray, config: FactorModelConfig, *,
                   loading_prior_sd: float | None = None) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    m = config.m
    a, b = IG_SHAPE, IG_SCALE
    g = np.zeros(config.q)
    w = np.concatenate(([theta[0]], theta[m:]))
    dw = -2.0 * a + 2.0 * b * np.exp(-2.0 * w)
    g[0] = dw[0]
    g[m:] = dw[1:]
    if loading_prior_sd is not None:
        g[1:m] = -theta[1:m] / loading_prior_sd**2
    return g


def log_posterior(data: CrossProductData, theta: np.ndarray, *,
                  loading_prior_sd: float | None = None) -> float:
    """Unnormalized log posterior: log likelihood + log prior."""
    config = FactorModelConfig(m=data.m, n=data.dof + 1)
    return log_likelihood(data, theta) + log_prior(
        theta, config, loading_prior_sd=loading_prior_sd
    )


def grad_log_posterior(data: CrossProductData, theta: np.ndarray, *,
                       loading_prior_sd: float | None = None) -> np.ndarray:
    """Analytical gradient of the log posterior in theta."""
    config = FactorModelConfig(m=data.m, n=data.dof + 1)
    theta = np.asarray(theta, dtype=float)
    _, cf = _chol_sigma(theta, config)
    sinv = cho_solve(cf, np.eye(config.m))
    # d loglik / dtheta_r = tr(A dSigma_r) / 2 with A = Sinv Y Sinv - dof * Sinv
    amat = sinv @ data.y @ sinv - data.dof * sinv
    dsig = sigma_derivatives(theta, config)
    grad = 0.5 * np.einsum("ij,aji->a", amat, dsig)
    return grad + grad_log_prior(theta, config, loading_prior_sd=loading_prior_sd)


def expected_hessian_log_posterior(data: CrossProductData, theta: np.ndarray, *,
                                   loading_prior_sd: float | None = None) -> np.ndarray:
    """Expected Hessian of the log posterior under E[Y] = dof * Sigma(theta).

    The likelihood part is -(dof/2) * G with
    G_rs = tr(Sigma^{-1} dSigma_r Sigma^{-1} dSigma_s); the prior contributes
    a deterministic diagonal on the log-SD coordinates.
    """
    config = FactorModelConfig(m=data.m, n=data.dof + 1)
    theta = np.asarray(theta, dtype=float)
    _, cf = _chol_sigma(theta, config)
    sinv = cho_solve(cf, np.eye(config.m))
    dsig = sigma_derivatives(theta, config)
    msig = np.einsum("ij,ajk->aik", sinv, dsig)
    gmat = np.einsum("aij,bji->ab", msig, msig)
    hess = -0.5 * data.dof * gmat
    m = config.m
    w = np.concatenate(([theta[0]], theta[m:]))
    dprior = -4.0 * IG_SCALE * np.exp(-2.0 * w)
    hess[0, 0] += dprior[0]
    hess[np.arange(m, 2 * m), np.arange(m, 2 * m)] += dprior[1:]
    if loading_prior_sd is not None:
        idx = np.arange(1, m)
        hess[idx, idx] += -1.0 / loading_prior_sd**2
    return 0.5 * (hess + hess.T)


# ---------------------------------------------------------------------------
# Fused fast path (hot loop: MCMC and the per-iteration MAP solves)
# ---------------------------------------------------------------------------


def posterior_value_and_grad(data: CrossProductData, theta: np.ndarray, *,
                             loading_prior_sd: float | None = None,
                             want_grad: bool = True):
    """Log posterior and (optionally) its gradient in one pass.

    Equivalent to :func:`log_posterior` / :func:`grad_log_posterior` but
    avoids rebuilding the derivative stack; the gradient uses the closed
    forms psi * lam' A lam, psi * (A lam)_j, and upsilon_j * A_jj with
    A = Sinv Y Sinv - dof * Sinv.
    """
    theta = np.asarray(theta, dtype=float)
    m = data.m
    zeta = theta[0]
    lam = np.concatenate(([1.0], theta[1:m]))
    w = np.concatenate(([zeta], theta[m:]))
    psi = np.exp(2.0 * zeta)
    upsilon = np.exp(2.0 * theta[m:])
    sigma = psi * np.outer(lam, lam)
    sigma[np.diag_indices(m)] += upsilon
    chol = np.linalg.cholesky(sigma)  # raises LinAlgError when singular
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    sinv = np.linalg.inv(sigma)
    value = -0.5 * data.dof * logdet - 0.5 * float(np.sum(sinv * data.y))

    a, b = IG_SHAPE, IG_SCALE
    const = a * math.log(b) - math.lgamma(a) + math.log(2.0)
    value += float(np.sum(const - 2.0 * a * w - b * np.exp(-2.0 * w)))
    if loading_prior_sd is not None:
        free = lam[1:]
        value += float(
            -0.5 * np.sum(free**2) / loading_prior_sd**2
            - (m - 1) * (0.5 * math.log(2.0 * math.pi) + math.log(loading_prior_sd))
        )
    if not want_grad:
        return value, None

    amat = sinv @ data.y @ sinv - data.dof * sinv
    alam = amat @ lam
    grad = np.empty(2 * m)
    grad[0] = psi * float(lam @ alam)
    grad[1:m] = psi * alam[1:]
    grad[m:] = upsilon * np.diag(amat)
    dprior = -2.0 * a + 2.0 * b * np.exp(-2.0 * w)
    grad[0] += dprior[0]
    grad[m:] += dprior[1:]
    if loading_prior_sd is not None:
        grad[1:m] += -theta[1:m] / loading_prior_sd**2
    return value, grad


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def sample_standard_wishart(m: int, dof: int, rng: np.random.Generator) -> np.ndarray:
    """One draw from Wishart(I_m, dof) via the Bartlett decomposition.

    Deterministic given the generator state.
    """
    if dof < m:
        raise ValueError(f"need dof >= m, got dof={dof}, m={m}")
    lower = np.zeros((m, m))
    idx = np.tril_indices(m, k=-1)
    lower[idx] = rng.standard_normal(len(idx[0]))
    diag = np.sqrt(rng.chisquare(dof - np.arange(m)))
    lower[np.diag_indices(m)] = diag
    return lower @ lower.T


def _unchecked_cross_product(y: np.ndarray, dof: int) -> CrossProductData:
    """Construct CrossProductData without re-validating (internal hot path)."""
    obj = object.__new__(CrossProductData)
    object.__setattr__(obj, "y", y)
    object.__setattr__(obj, "dof", dof)
    return obj


def generate_data(u: np.ndarray, theta: np.ndarray, config: FactorModelConfig, *,
                  validate: bool = True) -> CrossProductData:
    """Map a standard Wishart draw through Sigma^{1/2} u Sigma^{1/2}.

    Uses the symmetric (eigendecomposition) matrix square root.
    """
    u = np.asarray(u, dtype=float)
    if validate and np.linalg.eigvalsh(u).min() <= 0:
        raise ValueError("u must be symmetric positive definite")
    sigma = sigma_of_theta(theta, config)
    evals, evecs = np.linalg.eigh(sigma)
    root = (evecs * np.sqrt(evals)) @ evecs.T
    y = root @ u @ root
    y = 0.5 * (y + y.T)
    if validate:
        return CrossProductData(y=y, dof=config.dof)
    return _unchecked_cross_product(y, config.dof)
