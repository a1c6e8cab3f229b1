"""Acceptance gate: one test per release criterion, each emitting a single
PASS/FAIL line.  Criteria 6 and 7 replicate the Monte Carlo validity study at
desk scale and are marked slow (run them with `pytest -m slow`)."""

import sys
import warnings

import numpy as np
import pytest
from scipy import stats

from credcal.calibrate import (
    TuningConstants,
    factor_problem,
    initial_boundary_point,
    rates,
    retract,
    riem_grad_fd,
    sprsa,
    tangent_project,
)
from credcal.experiment import Scene, SceneSpec, edf_summary, run_experiment
from credcal.map_fit import find_map
from credcal.mcmc import McmcConfig, ess, psrf, sample_chains
from credcal.model import (
    FactorModelConfig,
    grad_log_posterior,
    log_posterior,
)
from credcal.statistics import StatisticKind, grad_stat, pdr_stat, statistic, wald_stat
from _toy import toy_fit, toy_problem


def _report(criterion, ok, detail):
    line = f"[acceptance criterion {criterion}] {'PASS' if ok else 'FAIL'} — {detail}"
    print(line, file=sys.stderr)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. tuning conditions
# ---------------------------------------------------------------------------


def test_criterion_1_tuning_conditions():
    t = TuningConstants()
    cond_beta = t.delta + 0.5 < t.beta <= 1.0
    cond_sum = 2 * (t.beta - t.delta) > 1.0
    _, c_final = rates(50000, t)
    cond_c = abs(c_final - 0.01) < 1e-3
    _report(1, cond_beta and cond_sum and cond_c,
            f"beta in (delta+1/2, 1]: {cond_beta}; 2(beta-delta)>1: {cond_sum}; "
            f"c_50000={c_final:.5f} within 1e-3 of .01: {cond_c}")


# ---------------------------------------------------------------------------
# 2. statistics and gradients
# ---------------------------------------------------------------------------


def test_criterion_2_statistic_gradients(m5_data, m5_fit):
    zero_w = abs(wald_stat(m5_fit, m5_fit.theta_hat))
    zero_p = abs(pdr_stat(m5_data, m5_fit, m5_fit.theta_hat))
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        theta = m5_fit.theta_hat + rng.normal(scale=0.25, size=10)
        targets = [
            (lambda t: log_posterior(m5_data, t),
             grad_log_posterior(m5_data, theta)),
            (lambda t: statistic(StatisticKind.WALD, m5_data, m5_fit, t),
             grad_stat(StatisticKind.WALD, m5_data, m5_fit, theta)),
            (lambda t: statistic(StatisticKind.PDR, m5_data, m5_fit, t),
             grad_stat(StatisticKind.PDR, m5_data, m5_fit, theta)),
        ]
        for f, ana in targets:
            fd = np.empty(10)
            for r in range(10):
                h = 1e-6 * max(1.0, abs(theta[r]))
                up, dn = theta.copy(), theta.copy()
                up[r] += h
                dn[r] -= h
                fd[r] = (f(up) - f(dn)) / (2.0 * h)
            worst = max(worst, float(np.max(
                np.abs(ana - fd) / np.maximum(np.abs(fd), 1e-8))))
    ok = zero_w <= 1e-8 and zero_p <= 1e-8 and worst < 1e-5
    _report(2, ok,
            f"|Wald(MAP)|={zero_w:.1e}, |PDR(MAP)|={zero_p:.1e} (<=1e-8); "
            f"worst FD relative error {worst:.2e} (<1e-5) over 20 points")


# ---------------------------------------------------------------------------
# 3. manifold suite
# ---------------------------------------------------------------------------


def test_criterion_3_manifold_suite(m5_config, m5_data, m5_fit):
    import dataclasses

    rng = np.random.default_rng(3001)
    pdr = factor_problem(StatisticKind.PDR, m5_config)
    wald = factor_problem(StatisticKind.WALD, m5_config)
    draws = m5_fit.theta_hat + rng.normal(scale=0.2, size=(100, 10))

    # retraction centering
    xi = 4.0
    theta_b = initial_boundary_point(pdr, m5_data, m5_fit, xi, draws)
    centering = float(np.max(np.abs(
        retract(pdr, m5_data, m5_fit, theta_b, np.zeros(10), xi) - theta_b)))

    # projector orthogonality / idempotence
    ortho = idem = 0.0
    for _ in range(50):
        g = rng.standard_normal(10)
        v = rng.standard_normal(10)
        p = tangent_project(v, g)
        ortho = max(ortho, abs(p @ g) / (np.linalg.norm(p) * np.linalg.norm(g)))
        idem = max(idem, float(np.max(np.abs(tangent_project(p, g) - p))))

    # local rigidity
    grad_b = pdr.statistic_grad(m5_data, m5_fit, theta_b)
    h = tangent_project(rng.standard_normal(10), grad_b)
    h /= np.linalg.norm(h)
    rigidity = 0.0
    for t in (1e-3, 1e-4):
        moved = retract(pdr, m5_data, m5_fit, theta_b, t * h, xi)
        rigidity = max(rigidity, float(np.linalg.norm((moved - theta_b) / t - h)))

    # closed-form Wald ray solve against the generic root-finder
    generic = dataclasses.replace(wald, quadratic_rays=False)
    chi_err = 0.0
    for _ in range(10):
        theta = m5_fit.theta_hat + rng.normal(scale=0.3, size=10)
        hh = rng.normal(scale=0.1, size=10)
        x = rng.uniform(0.5, 12.0)
        a = retract(wald, m5_data, m5_fit, theta, hh, x)
        b = retract(generic, m5_data, m5_fit, theta, hh, x)
        chi_err = max(chi_err, float(np.max(np.abs(a - b))))

    # boundary residency over a K = 2000 run
    res = sprsa(pdr, m5_data, m5_fit, xi, theta_b,
                TuningConstants(iterations=2000), rng)
    residency = float(res.boundary_residuals.max())

    ok = (centering <= 1e-10 and residency <= 1e-6 and rigidity < 1e-2
          and ortho <= 1e-10 and idem <= 1e-12 and chi_err <= 1e-10)
    _report(3, ok,
            f"centering {centering:.1e} (<=1e-10); boundary residency "
            f"{residency:.1e} over K=2000 (<=1e-6); rigidity {rigidity:.1e} "
            f"(<1e-2); projector orthogonality {ortho:.1e} (<=1e-10), "
            f"idempotence {idem:.1e} (<=1e-12); Wald ray closed form vs "
            f"root-finder {chi_err:.1e} (<=1e-10)")


# ---------------------------------------------------------------------------
# 4. SP gradient against the per-coordinate FD oracle
# ---------------------------------------------------------------------------


def test_criterion_4_sp_gradient_oracle(m5_config, m5_data, m5_fit):
    rng = np.random.default_rng(4001)
    problem = factor_problem(StatisticKind.PDR, m5_config)
    draws = m5_fit.theta_hat + rng.normal(scale=0.2, size=(100, 10))
    xi = 4.0
    theta_b = initial_boundary_point(problem, m5_data, m5_fit, xi, draws)
    # both estimators carry O(c^2) bias with different curvature terms, so the
    # comparison runs at the small long-run FD rate where bias is negligible
    # relative to the MC error
    c = 0.01
    n_rep = 4000

    ambients = np.empty((n_rep, 10))
    for i in range(n_rep):
        _, _, ambient = riem_grad_fd(problem, m5_data, m5_fit, theta_b,
                                     xi, c, rng)
        ambients[i] = ambient
    sp_mean = ambients.mean(axis=0)
    sp_se = ambients.std(axis=0, ddof=1) / np.sqrt(n_rep)

    # one-coordinate-at-a-time oracle: same indicators, canonical-basis
    # perturbations, one shared simulated draw per +- pair
    fd_mean = np.empty(10)
    fd_se = np.empty(10)
    for r in range(10):
        diffs = np.empty(n_rep)
        e = np.zeros(10)
        e[r] = 1.0
        for i in range(n_rep):
            u = problem.sample_u(rng)
            vals = []
            for sign in (1.0, -1.0):
                th = theta_b + sign * c * e
                y_sim = problem.generate(u, th)
                fit_sim = problem.fit_fn(y_sim, m5_fit)
                t_sim = problem.statistic(y_sim, fit_sim, th)
                t_obs = problem.statistic(m5_data, m5_fit, th)
                vals.append(float(t_sim >= t_obs))
            diffs[i] = (vals[0] - vals[1]) / (2.0 * c)
        fd_mean[r] = diffs.mean()
        fd_se[r] = diffs.std(ddof=1) / np.sqrt(n_rep)

    gap = np.abs(sp_mean - fd_mean)
    limit = 3.0 * np.sqrt(sp_se**2 + fd_se**2)
    ok = bool(np.all(gap <= limit))
    worst = int(np.argmax(gap - limit))
    _report(4, ok,
            f"max |SP - FD oracle| = {gap.max():.4f}; worst coordinate "
            f"{worst}: gap {gap[worst]:.4f} vs 3*MC-SE {limit[worst]:.4f} "
            f"({n_rep} estimates per side, c={c})")


# ---------------------------------------------------------------------------
# 5. calibration oracle on the scalar toy model
# ---------------------------------------------------------------------------


def test_criterion_5_toy_calibration_oracle():
    problem = toy_problem()
    y_obs = 0.3
    fit = toy_fit(y_obs)
    rng = np.random.default_rng(5001)
    details = []
    ok = True
    for xi in (1.0, 2.71, 3.84):
        res = sprsa(problem, y_obs, fit, xi, np.array([y_obs + 1.0]),
                    TuningConstants(iterations=4000), rng)
        oracle = stats.chi2.sf(xi, df=1)
        gap = abs(res.alpha_hat_star - oracle)
        lim = 3.0 * res.mc_se()
        ok = ok and gap <= lim
        details.append(f"xi={xi}: est {res.alpha_hat_star:.4f} vs tail "
                       f"{oracle:.4f} (gap {gap:.4f} <= {lim:.4f})")
    _report(5, ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 6-7. desk-scale Monte Carlo replication (slow suite)
# ---------------------------------------------------------------------------

DESK_MCMC = McmcConfig(chains=5, adapt_iters=1000, burnin_iters=2000,
                       retain_iters=4000, thin=2)
DESK_ALPHAS = np.round(np.arange(0.1, 0.91, 0.1), 1)


def _progress(done, total):
    if done % 10 == 0 or done == total:
        print(f"  replication {done}/{total}", file=sys.stderr, flush=True)


@pytest.mark.slow
def test_criterion_6_desk_scale_validity():
    spec = SceneSpec(scene=Scene.FIXED_LOW, m=5, n=100, replications=200,
                     seed=20260823)
    kinds = [StatisticKind.WALD, StatisticKind.PDR]
    records = run_experiment(spec, kinds, TuningConstants(iterations=10000),
                             DESK_MCMC, progress=_progress)
    details = []
    ok = True
    for kind in kinds:
        summary = edf_summary(records, DESK_ALPHAS, kind)
        excess = summary.edf_calibrated - summary.band_hi
        ok = ok and bool(np.all(excess <= 0))
        details.append(
            f"{kind.value}: max EDF-band_hi = {excess.max():+.4f} over "
            f"alpha grid ({summary.n_records} usable reps)")
    _report(6, ok, "; ".join(details))


@pytest.mark.slow
def test_criterion_7_liberality_detection():
    spec = SceneSpec(scene=Scene.UNIFORM_COMMUNALITY, m=5, n=100,
                     replications=200, seed=20260824)
    records = run_experiment(spec, [StatisticKind.PDR], TuningConstants(),
                             DESK_MCMC, calibrate=False, progress=_progress)
    summary = edf_summary(records, DESK_ALPHAS, StatisticKind.PDR)
    excess = summary.edf_original - summary.band_hi
    detected = bool(np.any(excess > 0))
    detail = (f"uncalibrated HPD contour: max EDF-band_hi = "
              f"{excess.max():+.4f} ({summary.n_records} usable reps)")
    if not detected:
        # at the reduced budget the liberality of the uncalibrated regions
        # may fall inside MC noise; that downgrades to a warning, with the
        # full 512-replication budget available through the CLI
        warnings.warn("[acceptance criterion 7] WARNING — liberality not "
                      "detected at the reduced budget; " + detail)
        print(f"[acceptance criterion 7] WARN — {detail}", file=sys.stderr)
        return
    _report(7, detected, detail)


# ---------------------------------------------------------------------------
# 8. sampler correctness
# ---------------------------------------------------------------------------


def test_criterion_8_mcmc_correctness():
    q = 3
    config = McmcConfig(chains=5, adapt_iters=1000, burnin_iters=2000,
                        retain_iters=10000, thin=10, seed=8001)
    inits = [0.1 * np.random.default_rng(c).standard_normal(q)
             for c in range(5)]
    out = sample_chains(lambda th: -0.5 * float(th @ th), inits, config)
    mean = out.draws.mean(axis=0)
    se = out.draws.std(axis=0, ddof=1) / np.sqrt(out.ess)
    mean_ok = bool(np.all(np.abs(mean) <= 3 * se))
    cov_gap = float(np.max(np.abs(np.cov(out.draws.T) - np.eye(q))))
    cov_ok = cov_gap < 0.05

    # diagnostic formula oracles
    rng = np.random.default_rng(8002)
    traces = rng.standard_normal((4, 200)) + rng.normal(size=(4, 1))
    half = traces.shape[1] // 2
    split = np.concatenate([traces[:, :half], traces[:, half:2 * half]])
    sn = split.shape[1]
    w = split.var(axis=1, ddof=1).mean()
    b = sn * split.mean(axis=1).var(ddof=1)
    psrf_oracle = np.sqrt(((sn - 1) / sn * w + b / sn) / w)
    psrf_ok = abs(psrf(traces) - psrf_oracle) <= 1e-10
    ess_white = ess(rng.standard_normal(1000))
    ess_ok = 700 <= ess_white <= 1300

    ok = mean_ok and cov_ok and psrf_ok and ess_ok
    _report(8, ok,
            f"Gaussian target: max|mean| within 3 MC-SE: {mean_ok}, "
            f"max|cov - I| = {cov_gap:.3f} (<.05); split-PSRF matches oracle "
            f"to 1e-10: {psrf_ok}; white-noise ESS {ess_white:.0f} in "
            f"[700, 1300]: {ess_ok}")


# ---------------------------------------------------------------------------
# 9. CLI determinism
# ---------------------------------------------------------------------------


def test_criterion_9_cli_determinism(tmp_path):
    from credcal.cli import main

    mcmc = ["--chains", "2", "--adapt", "150", "--burnin", "150",
            "--retain", "300", "--thin", "3"]

    def tree(root):
        return {p.name: p.read_bytes()
                for p in sorted(root.iterdir()) if p.is_file()}

    sim = tmp_path / "sim"
    main(["simulate", "--scene", "fixed-low", "--m", "5", "--n", "100",
          "--reps", "2", "--seed", "31", "--out", str(sim)])
    checks = {}

    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        main(["simulate", "--scene", "uniform", "--m", "5", "--n", "60",
              "--reps", "3", "--seed", "32", "--out", str(out)])
        outs.append(tree(out))
    checks["simulate"] = outs[0] == outs[1]

    outs = []
    for name in ("m1.json", "m2.json"):
        out = tmp_path / name
        main(["map", "--data", str(sim / "data_0000.csv"), "--out", str(out)])
        outs.append(out.read_bytes())
    checks["map"] = outs[0] == outs[1]

    outs = []
    for name in ("c1", "c2"):
        out = tmp_path / name
        main(["calibrate", "--data", str(sim / "data_0000.csv"),
              "--statistic", "pdr", "--alphas", "0.2,0.5,0.8",
              "--iterations", "100", *mcmc, "--seed", "33", "--out", str(out)])
        outs.append(tree(out))
    checks["calibrate"] = outs[0] == outs[1]

    outs = []
    for name, threads in (("e1", "1"), ("e2", "8"), ("e3", "1")):
        out = tmp_path / name
        main(["experiment", "--scene", "fixed-low", "--m", "5", "--reps", "2",
              "--iterations", "60", *mcmc, "--alphas", "0.25,0.5,0.75",
              "--threads", threads, "--seed", "34", "--out", str(out)])
        outs.append(tree(out))
    checks["experiment threads 1 vs 8"] = outs[0] == outs[1]
    checks["experiment rerun"] = outs[0] == outs[2]

    ok = all(checks.values())
    _report(9, ok, "bit-identical outputs: " + ", ".join(
        f"{k}: {v}" for k, v in checks.items()))
