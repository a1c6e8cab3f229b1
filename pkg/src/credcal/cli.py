"""Command-line interface: dataset simulation, MAP fitting, calibration
curves, and the Monte Carlo validity experiment."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import TuningConstants, calibrate_curve, factor_problem
from .experiment import (
    Scene,
    SceneSpec,
    generate_scene_theta,
    run_experiment,
    write_results,
)
from .map_fit import find_map
from .mcmc import McmcConfig, run_mcmc
from .model import CrossProductData, FactorModelConfig, generate_data, sample_standard_wishart
from .statistics import StatisticKind, posterior_quantile_thresholds

DEFAULT_GRID = [round(0.05 * i, 2) for i in range(1, 20)]  # Q = 19


def _manifest(command: str, config: dict, seed, started: float) -> dict:
    # wall clock goes to stdout, not into the manifest, so rerunning a
    # command with the same seed reproduces every output file bit for bit
    print(f"[{command}] wall clock {time.time() - started:.1f}s")
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
    }


def _load_data(path: str) -> CrossProductData:
    text = Path(path).read_text()
    if path.endswith(".json"):
        return CrossProductData.from_json(text)
    return CrossProductData.from_csv(text)


def _add_mcmc_args(p):
    p.add_argument("--chains", type=int, default=5)
    p.add_argument("--adapt", type=int, default=1000)
    p.add_argument("--burnin", type=int, default=10000)
    p.add_argument("--retain", type=int, default=10000)
    p.add_argument("--thin", type=int, default=10)


def _add_tuning_args(p):
    p.add_argument("--iterations", type=int, default=50000,
                   help="stochastic-approximation iterations per threshold")
    p.add_argument("--rate-alpha", type=float, default=0.1)
    p.add_argument("--rate-beta", type=float, default=0.65)
    p.add_argument("--rate-gamma", type=float, default=0.05)
    p.add_argument("--rate-delta", type=float, default=0.149)


def _tuning(args) -> TuningConstants:
    return TuningConstants(alpha=args.rate_alpha, beta=args.rate_beta,
                           gamma=args.rate_gamma, delta=args.rate_delta,
                           iterations=args.iterations)


def _parse_alphas(text: str):
    alphas = [float(v) for v in text.split(",") if v.strip()]
    if any(a <= 0 or a >= 1 for a in alphas):
        raise argparse.ArgumentTypeError("alphas must lie in (0, 1)")
    return alphas


def cmd_simulate(args) -> int:
    started = time.time()
    spec = SceneSpec(scene=Scene(args.scene), m=args.m, n=args.n,
                     replications=args.reps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = spec.config
    theta_lines = []
    for rep in range(spec.replications):
        root = np.random.SeedSequence(entropy=(args.seed, rep))
        ss_scene, ss_data = root.spawn(2)
        theta = generate_scene_theta(spec, np.random.default_rng(ss_scene))
        u = sample_standard_wishart(config.m, config.dof, np.random.default_rng(ss_data))
        data = generate_data(u, theta, config)
        (out / f"data_{rep:04d}.csv").write_text(data.to_csv())
        theta_lines.append(
            f"{rep}," + ",".join(format(v, ".17g") for v in theta)
        )
    header = "rep_id," + ",".join(f"theta_{i + 1}" for i in range(config.q))
    (out / "thetas.csv").write_text(header + "\n" + "\n".join(theta_lines) + "\n")
    (out / "manifest.json").write_text(json.dumps(
        _manifest("simulate", {"scene": args.scene, "m": args.m, "n": args.n,
                               "reps": args.reps},
                  args.seed, started),
        indent=2, sort_keys=True))
    print(f"wrote {spec.replications} datasets to {out}")
    return 0


def cmd_map(args) -> int:
    started = time.time()
    data = _load_data(args.data)
    fit = find_map(data)
    if not fit.converged:
        print("warning: MAP solve did not reach the gradient tolerance",
              file=sys.stderr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(fit.to_json())
    Path(str(out) + ".manifest.json").write_text(json.dumps(
        _manifest("map", {"data": args.data}, None, started),
        indent=2, sort_keys=True))
    print(f"MAP written to {out} (grad norm {fit.grad_norm:.2e})")
    return 0


def cmd_calibrate(args) -> int:
    started = time.time()
    data = _load_data(args.data)
    kind = StatisticKind(args.statistic)
    config = FactorModelConfig(m=data.m, n=data.dof + 1)
    fit = find_map(data)
    mcmc_config = McmcConfig(chains=args.chains, adapt_iters=args.adapt,
                             burnin_iters=args.burnin, retain_iters=args.retain,
                             thin=args.thin, seed=args.seed)
    draws = run_mcmc(data, mcmc_config, init=fit.theta_hat,
                     proposal_cov=fit.sigma_theta_hat)
    if not draws.converged:
        print("warning: MCMC convergence screen failed "
              f"(max PSRF {draws.psrf.max():.3f}, min ESS {draws.ess.min():.0f})",
              file=sys.stderr)
    alphas = np.asarray(args.alphas, dtype=float)
    thresholds = posterior_quantile_thresholds(draws.draws, kind, data, fit, alphas)
    problem = factor_problem(kind, config)
    rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0xCA11)))
    curve = calibrate_curve(problem, data, fit, draws.draws, alphas,
                            thresholds, _tuning(args), rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(curve.to_csv())
    (out / "curve.json").write_text(curve.to_json())
    (out / "diagnostics.json").write_text(draws.diagnostics_json())
    (out / "manifest.json").write_text(json.dumps(
        _manifest("calibrate",
                  {"data": args.data, "statistic": args.statistic,
                   "alphas": list(map(float, alphas)),
                   "iterations": args.iterations,
                   "mcmc": {"chains": args.chains, "adapt": args.adapt,
                            "burnin": args.burnin, "retain": args.retain,
                            "thin": args.thin}},
                  args.seed, started),
        indent=2, sort_keys=True))
    print(f"calibration curve written to {out}")
    return 0


def cmd_experiment(args) -> int:
    started = time.time()
    spec = SceneSpec(scene=Scene(args.scene), m=args.m, n=args.n,
                     replications=args.reps, seed=args.seed)
    kinds = ([StatisticKind(args.statistic)] if args.statistic != "both"
             else [StatisticKind.WALD, StatisticKind.PDR])
    mcmc_config = McmcConfig(chains=args.chains, adapt_iters=args.adapt,
                             burnin_iters=args.burnin, retain_iters=args.retain,
                             thin=args.thin, seed=0)

    def progress(done, total):
        print(f"replication {done}/{total}", file=sys.stderr)

    records = run_experiment(spec, kinds, _tuning(args), mcmc_config,
                             threads=args.threads,
                             calibrate=not args.no_calibration,
                             progress=progress if args.verbose else None)
    manifest = _manifest(
        "experiment",
        {"scene": args.scene, "m": args.m, "n": args.n, "reps": args.reps,
         "iterations": args.iterations, "statistic": args.statistic,
         "alphas": list(map(float, args.alphas)),
         "mcmc": {"chains": args.chains, "adapt": args.adapt,
                  "burnin": args.burnin, "retain": args.retain,
                  "thin": args.thin}},
        args.seed, started)
    write_results(records, kinds, args.out, np.asarray(args.alphas), manifest)
    n_flagged = sum(1 for r in records if r.flags)
    if n_flagged:
        print(f"warning: {n_flagged}/{len(records)} replications carry flags",
              file=sys.stderr)
    print(f"experiment results written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="credcal",
        description="Frequentist calibration of Bayesian credible regions "
                    "for the one-factor covariance model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate scene datasets")
    p.add_argument("--scene", choices=[s.value for s in Scene], required=True)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--reps", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("map", help="MAP fit of one dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="map.json")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("calibrate", help="calibration curve for one dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--statistic", choices=["wald", "pdr"], default="pdr")
    p.add_argument("--alphas", type=_parse_alphas, default=DEFAULT_GRID)
    _add_tuning_args(p)
    _add_mcmc_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("experiment", help="Monte Carlo validity experiment")
    p.add_argument("--scene", choices=[s.value for s in Scene], required=True)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--reps", type=int, default=512)
    p.add_argument("--statistic", choices=["wald", "pdr", "both"], default="both")
    p.add_argument("--alphas", type=_parse_alphas,
                   default=[round(0.1 * i, 1) for i in range(1, 10)])
    p.add_argument("--no-calibration", action="store_true",
                   help="skip calibration, record original contours only")
    _add_tuning_args(p)
    _add_mcmc_args(p)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
