"""Adaptive random-walk Metropolis sampler with multi-chain diagnostics.

The proposal scale follows a Robbins-Monro recursion targeting a .234
acceptance rate and the proposal covariance is shaped by the running empirical
covariance of the chain.  Adaptation happens only during the adaptation phase;
the kernel is frozen afterwards, so the burn-in and retention phases satisfy
detailed balance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .map_fit import default_init
from .model import CrossProductData, posterior_value_and_grad

__all__ = ["McmcConfig", "PosteriorDraws", "run_mcmc", "sample_chains", "psrf", "ess"]

TARGET_ACCEPT = 0.234
PSRF_LIMIT = 1.1
ESS_LIMIT = 100.0


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 5
    adapt_iters: int = 1000
    burnin_iters: int = 10000
    retain_iters: int = 10000
    thin: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("chains", "adapt_iters", "burnin_iters", "retain_iters", "thin"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.retain_iters % self.thin != 0:
            raise ValueError("retain_iters must be a multiple of thin")


@dataclass
class PosteriorDraws:
    """Retained, thinned draws from all chains plus convergence diagnostics."""

    draws: np.ndarray           # (n_draws, q)
    chain_ids: np.ndarray       # (n_draws,)
    psrf: np.ndarray            # per parameter
    ess: np.ndarray             # per parameter, summed over chains
    acceptance_rate: float
    converged: bool

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def diagnostics_json(self) -> str:
        return json.dumps(
            {
                "psrf": self.psrf.tolist(),
                "ess": self.ess.tolist(),
                "acceptance_rate": float(self.acceptance_rate),
                "converged": bool(self.converged),
            },
            separators=(",", ":"),
        )

    def draws_csv(self) -> str:
        q = self.draws.shape[1]
        lines = [",".join(f"theta_{i + 1}" for i in range(q)) + ",chain"]
        for row, cid in zip(self.draws, self.chain_ids):
            lines.append(",".join(format(v, ".17g") for v in row) + f",{int(cid)}")
        return "\n".join(lines) + "\n"


def _run_chain(log_density, init, config: McmcConfig, rng: np.random.Generator,
               cov0: np.ndarray | None = None):
    q = len(init)
    theta = np.asarray(init, dtype=float).copy()
    lp = log_density(theta)
    if not np.isfinite(lp):
        raise ValueError("log density is not finite at the initial point")

    log_scale = np.log(2.38 / np.sqrt(q))
    cov = np.eye(q) if cov0 is None else np.asarray(cov0, dtype=float)
    mean = theta.copy()
    sq = np.zeros((q, q))
    chol = np.linalg.cholesky(cov)

    def propose():
        return theta + np.exp(log_scale) * (chol @ rng.standard_normal(q))

    # adaptation phase: tune scale and shape, then freeze
    window_accepts = 0
    for k in range(1, config.adapt_iters + 1):
        cand = propose()
        try:
            lp_cand = log_density(cand)
        except np.linalg.LinAlgError:
            lp_cand = -np.inf
        accept = np.log(rng.random()) < lp_cand - lp
        if accept:
            theta, lp = cand, lp_cand
            window_accepts += 1
        log_scale += k ** -0.6 * ((1.0 if accept else 0.0) - TARGET_ACCEPT)
        delta = theta - mean
        mean += delta / k
        sq += np.outer(delta, theta - mean)
        if cov0 is None and k >= 2 * q and k % 25 == 0:
            cov = sq / (k - 1) + 1e-6 * np.eye(q)
            chol = np.linalg.cholesky(cov)
        if k % 200 == 0:
            if window_accepts == 0:
                raise RuntimeError("proposal step size underflow: no acceptances "
                                   "over a full adaptation window")
            window_accepts = 0

    # frozen kernel: burn-in then retention with thinning
    scale = np.exp(log_scale)
    kept = np.empty((config.retain_iters // config.thin, q))
    n_kept = 0
    accepts = 0
    total = config.burnin_iters + config.retain_iters
    for i in range(1, total + 1):
        cand = theta + scale * (chol @ rng.standard_normal(q))
        try:
            lp_cand = log_density(cand)
        except np.linalg.LinAlgError:
            lp_cand = -np.inf
        if np.log(rng.random()) < lp_cand - lp:
            theta, lp = cand, lp_cand
            if i > config.burnin_iters:
                accepts += 1
        if i > config.burnin_iters and (i - config.burnin_iters) % config.thin == 0:
            kept[n_kept] = theta
            n_kept += 1
    return kept, accepts / config.retain_iters


def sample_chains(log_density, inits, config: McmcConfig,
                  proposal_cov: np.ndarray | None = None) -> PosteriorDraws:
    """Run all chains on an arbitrary log density and compute diagnostics.

    ``inits`` is a sequence of per-chain starting vectors of equal length.
    ``proposal_cov`` fixes the proposal shape (e.g. a Laplace covariance);
    without it the shape is learned from the running empirical covariance
    during adaptation.
    """
    if len(inits) != config.chains:
        raise ValueError("need one starting vector per chain")
    streams = np.random.SeedSequence(config.seed).spawn(config.chains)
    traces = []
    acc = []
    for init, ss in zip(inits, streams):
        kept, rate = _run_chain(log_density, init, config,
                                np.random.default_rng(ss), cov0=proposal_cov)
        traces.append(kept)
        acc.append(rate)
    traces = np.array(traces)  # (chains, n, q)
    q = traces.shape[2]

    rhat = np.array([psrf(traces[:, :, j]) for j in range(q)])
    ess_vals = np.array([
        sum(ess(traces[c, :, j]) for c in range(config.chains)) for j in range(q)
    ])
    converged = bool(np.all(rhat <= PSRF_LIMIT) and np.all(ess_vals >= ESS_LIMIT))

    n = traces.shape[1]
    draws = traces.reshape(config.chains * n, q)
    chain_ids = np.repeat(np.arange(config.chains), n)
    return PosteriorDraws(
        draws=draws,
        chain_ids=chain_ids,
        psrf=rhat,
        ess=ess_vals,
        acceptance_rate=float(np.mean(acc)),
        converged=converged,
    )


def run_mcmc(data: CrossProductData, config: McmcConfig,
             init: np.ndarray | None = None, *,
             loading_prior_sd: float | None = None,
             log_density=None,
             proposal_cov: np.ndarray | None = None) -> PosteriorDraws:
    """Sample the factor-model posterior.

    Chains start from the moment-based initializer jittered by N(0, .1^2) per
    coordinate with distinct sub-seeds.  ``log_density`` can replace the model
    posterior (test hook); ``proposal_cov`` fixes the proposal shape.
    """
    if log_density is None:
        def log_density(theta):
            value, _ = posterior_value_and_grad(
                data, theta, loading_prior_sd=loading_prior_sd, want_grad=False
            )
            return value
    if init is None:
        init = default_init(data)
    jitter_streams = np.random.SeedSequence((config.seed, 0x6A)).spawn(config.chains)
    inits = [
        np.asarray(init, dtype=float)
        + 0.1 * np.random.default_rng(ss).standard_normal(len(init))
        for ss in jitter_streams
    ]
    return sample_chains(log_density, inits, config, proposal_cov=proposal_cov)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def psrf(traces: np.ndarray) -> float:
    """Split-chain potential scale reduction factor (classic form).

    ``traces`` is a (chains, n) array for a single coordinate.  Each chain is
    split in half before applying the Gelman-Rubin formula.
    """
    traces = np.asarray(traces, dtype=float)
    if traces.ndim != 2 or traces.shape[0] < 2:
        raise ValueError("psrf needs at least 2 chains")
    n = traces.shape[1]
    half = n // 2
    split = np.concatenate([traces[:, :half], traces[:, half : 2 * half]], axis=0)
    sn = split.shape[1]
    means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1)
    w = within.mean()
    b = sn * means.var(ddof=1)
    if w == 0.0:
        return np.inf if b > 0 else 1.0
    var_plus = (sn - 1) / sn * w + b / sn
    return float(np.sqrt(var_plus / w))


def ess(trace: np.ndarray) -> float:
    """Effective sample size via Geyer's initial positive sequence."""
    trace = np.asarray(trace, dtype=float)
    n = len(trace)
    if n < 4:
        raise ValueError("trace too short for ESS")
    centered = trace - trace.mean()
    var0 = float(centered @ centered) / n
    if var0 == 0.0:
        raise ValueError("ESS undefined for a constant trace")
    # autocovariances via FFT
    size = 1
    while size < 2 * n:
        size *= 2
    fft = np.fft.rfft(centered, size)
    acov = np.fft.irfft(fft * np.conj(fft), size)[:n].real / n
    rho = acov / acov[0]
    tau = 0.0
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0.0:
            break
        tau += pair
        k += 1
    tau = max(2.0 * tau - 1.0, 1.0 / n)
    return n / tau
