"""Command-line entry point.

Subcommands: run-experiment, crn-sweep, two-point, fit, predict,
ground-truth.  Exit status is 0 on success, 2 for usage or configuration
errors and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .crn import SWEEP_COLUMNS, SweepConfig, TwoPointModel, classify_regime, mse_two_point, synthetic_sweep
from .errors import EmptySampleError, FitError, InputError, NumericError
from .estimation import BASES, plugin_predict, fit_mle
from .experiment import (
    ExperimentConfig,
    cached_ground_truth,
    config_from_mapping,
    run_experiment,
    space_setup,
)
from .formats import (
    ConfigError,
    Section,
    load_config,
    load_model,
    read_dataset,
    read_numeric_table,
    save_model,
    write_table,
)
from .metamodel import GPR, SK, SKI

logger = logging.getLogger("skinad")


class UsageError(Exception):
    pass


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["out_dir"] = args.out
    if args.threads is not None:
        kw["threads"] = args.threads
    return replace(cfg, **kw) if kw else cfg


def _experiment_config(args) -> ExperimentConfig:
    if args.config is None:
        raise UsageError("--config is required")
    return _apply_overrides(config_from_mapping(load_config(args.config), args.config), args)


# ---------------------------------------------------------------- commands

def cmd_run_experiment(args) -> int:
    cfg = _experiment_config(args)
    rows = run_experiment(cfg)
    print(f"{'space':<8}{'N':>7}  {'method':<6}{'EMSE':>14}{'SE':>12}  reps  failed")
    for r in rows:
        print(f"{r.design_space:<8}{r.N:>7}  {r.method:<6}{r.emse:>14.6g}{r.se:>12.3g}  {r.replications:>4}  {r.failures:>6}")
    print(f"wrote {Path(cfg.out_dir) / 'emse.csv'}")
    return 0


def cmd_ground_truth(args) -> int:
    cfg = _experiment_config(args)
    for name in cfg.spaces:
        gt, path = cached_ground_truth(cfg, space_setup(cfg, name))
        print(f"{name}: {gt.mean.size} points, max relative SE {np.max(gt.relative_se):.3g}, "
              f"{int(gt.replications.sum())} replications -> {path}")
    return 0


def sweep_config_from_mapping(m: dict, source: str) -> tuple[SweepConfig, str]:
    top = Section(m, source)
    top.reject_unknown({"seed", "threads", "sweep", "output"})
    sw = top.section("sweep")
    sw.reject_unknown({"omegas", "thetas", "sigma_eps_sq", "sigma_zeta_sq", "instances", "macro_replications",
                       "replications", "tau_m_sq", "tau_w_sq", "design", "observations", "grid"})
    kw = {}
    for key in ("omegas", "thetas", "sigma_eps_sq", "sigma_zeta_sq", "design", "observations", "grid"):
        if key in sw.m:
            v = sw.m[key]
            if not isinstance(v, list) or not v or not all(isinstance(t, (int, float)) and not isinstance(t, bool)
                                                           for t in v):
                raise sw.error(f"expected a nonempty list of numbers, got {v!r}", key)
            kw[key] = tuple(float(t) for t in v)
    for key in ("instances", "macro_replications", "replications"):
        val = sw.get(key, int, None, check=lambda v: v >= 1)
        if val is not None:
            kw[key] = val
    for key in ("tau_m_sq", "tau_w_sq"):
        val = sw.get(key, float, None, check=lambda v: v > 0)
        if val is not None:
            kw[key] = val
    kw["seed"] = top.get("seed", int, 0, check=lambda v: v >= 0)
    kw["threads"] = top.get("threads", int, 1, check=lambda v: v >= 1)
    out = top.section("output")
    out.reject_unknown({"dir"})
    try:
        cfg = SweepConfig(**kw)
    except InputError as exc:
        raise ConfigError(f"{source}: line {sw._line()}: sweep: {exc}") from None
    return cfg, out.get("dir", str, "sweep")


def cmd_crn_sweep(args) -> int:
    if args.config is not None:
        cfg, out = sweep_config_from_mapping(load_config(args.config), args.config)
    else:
        cfg, out = SweepConfig(), "sweep"
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    out = Path(args.out or out)
    res = synthetic_sweep(cfg)
    write_table(out / "sweep.csv", SWEEP_COLUMNS, res.rows())
    for c in res.cells:
        name = f"theta{c.theta:g}_eps{c.sigma_eps_sq:g}_zeta{c.sigma_zeta_sq:g}.csv"
        write_table(out / "curves" / name, ["omega", "ratio_mean", "ratio_se"],
                    zip(c.omegas, c.ratio_mean, c.ratio_se))
        if c.error:
            print(f"cell theta={c.theta:g} sigma_eps_sq={c.sigma_eps_sq:g} sigma_zeta_sq={c.sigma_zeta_sq:g} "
                  f"failed: {c.error}", file=sys.stderr)
    print(f"{len(res.cells)} cells x {len(cfg.omegas)} omega values -> {out / 'sweep.csv'}")
    return 0


def cmd_two_point(args) -> int:
    if not 0.0 <= args.omega_min < args.omega_max <= 1.0:
        raise UsageError(f"need 0 <= --omega-min < --omega-max <= 1, got {args.omega_min}, {args.omega_max}")
    if args.omega_steps < 2:
        raise UsageError("--omega-steps must be at least 2")
    m = TwoPointModel(args.rho, args.tau_m_sq, args.tau_w_sq, args.v, args.r0, args.r12, args.sigma_zeta_sq)
    rep = classify_regime(m)
    print(f"regime: {rep.regime}")
    print(f"threshold_low: {rep.threshold_low:.17g}")
    print(f"threshold_high: {rep.threshold_high:.17g}")
    if rep.omega_star is not None:
        print(f"omega_star: {rep.omega_star:.17g}")
    if args.out is not None:
        grid = np.linspace(args.omega_min, args.omega_max, args.omega_steps)
        rows = [(w, mse_two_point(replace(m, omega=float(w)))) for w in grid]
        path = Path(args.out) / "two_point_curve.csv"
        write_table(path, ["omega", "mse"], rows)
        print(f"wrote {path}")
    return 0


def _fit_settings(args):
    """FitConfig and basis from the optional config file's fit section."""
    if args.config is None:
        cfg = ExperimentConfig()
        fit, basis = cfg.fit, cfg.basis
    else:
        cfg = config_from_mapping(load_config(args.config), args.config)
        fit, basis = cfg.fit, cfg.basis
    if args.seed is not None:
        fit = replace(fit, seed=args.seed)
    if args.threads is not None:
        fit = replace(fit, threads=args.threads)
    return fit, basis


def cmd_fit(args) -> int:
    data = read_dataset(args.data)
    fit, basis = _fit_settings(args)
    report = fit_mle(data, BASES[basis], fit, method=args.method)
    path = Path(args.out or ".") / "model.json"
    save_model(path, report)
    status = "converged" if report.converged else "NOT converged"
    print(f"{report.method} fit {status}: loglik {report.loglik:.10g}, "
          f"gradient norm {report.final_gradient_norm:.3g}, {report.iterations} iterations")
    for name, v in report.estimates().items():
        print(f"  {name}: {v}")
    print(f"wrote {path}")
    return 0


def cmd_predict(args) -> int:
    report = load_model(args.model)
    data = read_dataset(args.data)
    header, pts = read_numeric_table(args.points)
    if pts.ndim != 2 or pts.shape[1] != data.d:
        raise InputError(f"{args.points}: expected {data.d} coordinate columns, got {pts.shape[1]}")
    pr = plugin_predict(report, data, pts)
    mean, mse = np.atleast_1d(pr.mean), np.atleast_1d(pr.mse)
    path = Path(args.out or ".") / "predictions.csv"
    write_table(path, [*header, "mean", "mse"], [(*pts[i], mean[i], mse[i]) for i in range(pts.shape[0])])
    print(f"{pts.shape[0]} predictions -> {path}")
    return 0


# ---------------------------------------------------------------- parser

def _common(p, config_required=False):
    p.add_argument("--config", metavar="PATH", required=config_required, help="YAML configuration file")
    p.add_argument("--seed", type=int, metavar="N", help="override the configured master seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--threads", type=int, metavar="N", help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skinad", description="Stochastic kriging with model discrepancy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-experiment", help="production-line EMSE comparison")
    _common(p, config_required=True)
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("ground-truth", help="compute and cache ground truth for the configured spaces")
    _common(p, config_required=True)
    p.set_defaults(func=cmd_ground_truth)

    p = sub.add_parser("crn-sweep", help="EMSE ratio sweep over the CRN correlation")
    _common(p)
    p.set_defaults(func=cmd_crn_sweep)

    p = sub.add_parser("two-point", help="classify the two-point CRN model")
    for flag, kw in [("--rho", {}), ("--tau-m-sq", {}), ("--tau-w-sq", {}), ("--v", {}), ("--r0", {}),
                     ("--r12", {}), ("--sigma-zeta-sq", {})]:
        p.add_argument(flag, type=float, required=True, **kw)
    p.add_argument("--omega-min", type=float, default=0.0)
    p.add_argument("--omega-max", type=float, default=1.0)
    p.add_argument("--omega-steps", type=int, default=101)
    _common(p)
    p.set_defaults(func=cmd_two_point)

    p = sub.add_parser("fit", help="fit a model to a dataset directory")
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--method", choices=[SKI, SK, GPR], default=None,
                   help="defaults to SKI when the dataset has observations")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict at points from a saved model")
    p.add_argument("--model", metavar="PATH", required=True)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--points", metavar="PATH", required=True, help="table with one column per coordinate")
    _common(p)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InputError, NumericError, FitError, EmptySampleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
