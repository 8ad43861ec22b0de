"""Command-line interface: ``mmar {simulate,estimate,test,power,cloud}``."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .io import (
    MODES,
    CloudCache,
    RunConfig,
    format_report,
    load_cloud,
    load_price_csv,
    run_pipeline,
    save_cloud,
    write_price_csv,
)
from .longmem import DEFAULT_TRUNCATION, MmarParams, simulate_mmar
from .mctest import DEFAULT_LEVELS, build_cloud_ar, build_cloud_niid, size_power_cell
from .prefilter import fit_ar
from .scaling import DEFAULT_QS, default_scales, estimate
from .series import PriceSeries, SeedSpec, cumulate, to_log_returns


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _date(text: str) -> dt.date:
    return dt.date.fromisoformat(text)


def _ar_spec(text: str) -> dict:
    """``"1:0.3,5:-0.1"`` -> ``{1: 0.3, 5: -0.1}``."""
    out = {}
    for item in text.split(","):
        if item.strip():
            lag, coef = item.split(":")
            out[int(lag)] = float(coef)
    return out


def _add_grid_args(p):
    p.add_argument("--qs", type=_floats, default=DEFAULT_QS,
                   help="moment orders, comma separated (default 0.5,1.0,...,5.0)")
    p.add_argument("--ns", type=_ints, default=None,
                   help="scales, comma separated (default: 20 log-spaced in [4, T/8])")


def _add_run_args(p):
    p.add_argument("--reps", type=int, default=5000, help="cloud replications (default 5000)")
    p.add_argument("--T", type=int, default=None,
                   help="cloud sample length (default: length of the tested series)")
    p.add_argument("--seed", type=int, default=RunConfig.master_seed,
                   help=f"master seed (default {RunConfig.master_seed})")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default $MMAR_THREADS or 1)")


def cmd_simulate(args) -> int:
    params = MmarParams(args.H, args.lam, args.T)
    r = simulate_mmar(params, SeedSpec(args.seed, args.stream), args.truncation)
    prices = PriceSeries(np.exp(cumulate(args.sigma * r.values, np.log(args.p0))))
    write_price_csv(args.out or sys.stdout, prices)
    return 0


def cmd_estimate(args) -> int:
    rows = []
    for path in args.inputs:
        returns = to_log_returns(load_price_csv(path, args.start, args.end)).values
        lags = {}
        if args.filter:
            ar = fit_ar(returns)
            returns, lags = ar.residuals.values, ar.coefficients
        ns = args.ns if args.ns is not None else default_scales(returns.size)
        s = estimate(returns, args.qs, ns)
        rows.append({"series": Path(path).stem, "T": int(returns.size), "H_hat": s.H,
                     "lambda_hat": s.lam, "tau1": s.tau1, "tau2": s.tau2,
                     "alpha0": s.alpha0, "alpha1": s.alpha1, "alpha_min": s.alphaMin,
                     "alpha_max": s.alphaMax, "ar_lags": {str(k): v for k, v in lags.items()},
                     "flags": list(s.flags)})
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'series':<16} {'T':>6} {'H_hat':>7} {'lam_hat':>7} {'tau1':>8} {'tau2':>8}")
        for r in rows:
            print(f"{r['series']:<16} {r['T']:>6} {r['H_hat']:7.3f} {r['lambda_hat']:7.3f} "
                  f"{r['tau1']:8.4f} {r['tau2']:8.4f}")
    return 0


def cmd_test(args) -> int:
    config = RunConfig(
        inputs=args.inputs, start=args.start, end=args.end, qs=args.qs, ns=args.ns,
        reps=args.reps, T=args.T, master_seed=args.seed, mode=args.mode,
        output_dir=args.out, cache_dir=args.cache_dir, max_lag=args.max_lag,
        ellipse_levels=args.ellipse_levels, kurtosis_reps=args.kurtosis_reps,
        n_jobs=args.jobs,
    )
    results = run_pipeline(config)
    sys.stdout.write(format_report(list(results.values()), config.mode))
    return 1 if any(r.error for r in results.values()) else 0


def cmd_power(args) -> int:
    clouds = {}
    print(f"{'T':>6} {'H':>5} {'lam':>5}  " + "  ".join(
        f"{t}@{a:g}" for t in ("H", "lam", "joint") for a in args.levels))
    for T in args.T:
        ns = args.ns if args.ns is not None else default_scales(T)
        clouds[T] = build_cloud_niid(T, args.reps, args.seed, args.qs, ns, args.jobs)
        for lam in args.lam:
            for H in args.H:
                cell = size_power_cell(H, lam, T, args.outer, clouds[T], args.levels,
                                       seed=args.seed + 1, n_jobs=args.jobs)
                rates = [r for t in ("H", "lambda", "joint") for r in cell.rates[t]]
                print(f"{T:>6} {H:5.2f} {lam:5.2f}  " + "  ".join(f"{r:.3f}" for r in rates),
                      flush=True)
    return 0


def cmd_cloud_build(args) -> int:
    ns = args.ns if args.ns is not None else default_scales(args.T)
    if args.ar:
        cloud = build_cloud_ar(args.ar, args.T, args.reps, args.seed, args.qs, ns, args.jobs)
    else:
        cloud = build_cloud_niid(args.T, args.reps, args.seed, args.qs, ns, args.jobs)
    if args.out:
        path = Path(args.out)
    else:
        cache = CloudCache(args.cache_dir)
        if cache.directory is None:
            raise SystemExit("give --out or --cache-dir (or set MMAR_CACHE_DIR)")
        cache.directory.mkdir(parents=True, exist_ok=True)
        path = cache.directory / f"cloud_{cloud.fingerprint()}.json"
    save_cloud(cloud, path)
    print(path)
    return 0


def cmd_cloud_inspect(args) -> int:
    cloud = load_cloud(args.path)
    q = [0.005, 0.025, 0.5, 0.95, 0.975, 0.995]
    print(f"null model : {cloud.null_model}")
    print(f"T          : {cloud.T}")
    print(f"reps       : {cloud.reps} ({cloud.n_excluded} excluded)")
    print(f"seed       : {cloud.master_seed}")
    print(f"fingerprint: {cloud.fingerprint()}")
    print(f"H   mean {cloud.H.mean():.4f} sd {cloud.H.std(ddof=1):.4f} quantiles "
          + " ".join(f"{v:.4f}" for v in np.quantile(cloud.H, q)))
    print(f"lam mean {cloud.lam.mean():.4f} sd {cloud.lam.std(ddof=1):.4f} quantiles "
          + " ".join(f"{v:.4f}" for v in np.quantile(cloud.lam, q)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmar", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic MMAR price series as CSV")
    p.add_argument("--H", type=float, default=0.5, help="Hurst exponent (default 0.5)")
    p.add_argument("--lam", type=float, default=1.0, help="multifractality lambda (default 1)")
    p.add_argument("--T", type=int, default=5000, help="number of returns (default 5000)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--stream", type=int, default=0, help="stream index (default 0)")
    p.add_argument("--p0", type=float, default=100.0, help="initial price (default 100)")
    p.add_argument("--sigma", type=float, default=0.01,
                   help="scale of the unit-variance returns (default 0.01)")
    p.add_argument("--truncation", type=int, default=DEFAULT_TRUNCATION,
                   help=f"MA truncation and burn-in (default {DEFAULT_TRUNCATION})")
    p.add_argument("--out", help="output CSV (default stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="point estimates of H and lambda")
    p.add_argument("inputs", nargs="+", help="date,price CSV files")
    p.add_argument("--start", type=_date, help="first date (inclusive)")
    p.add_argument("--end", type=_date, help="last date (inclusive)")
    p.add_argument("--filter", action="store_true", help="AR pre-filter the returns first")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    _add_grid_args(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("test", help="three-test report for each input series")
    p.add_argument("inputs", nargs="+", help="date,price CSV files")
    p.add_argument("--mode", choices=MODES, default="filtered-niid",
                   help="filtered returns vs NIID cloud, or raw returns vs AR cloud "
                        "(default filtered-niid)")
    p.add_argument("--start", type=_date, help="first date (inclusive)")
    p.add_argument("--end", type=_date, help="last date (inclusive)")
    p.add_argument("--out", help="output directory for report and CSV files (default: none)")
    p.add_argument("--cache-dir", help="cloud cache directory (default $MMAR_CACHE_DIR)")
    p.add_argument("--max-lag", type=int, default=12, help="largest AR lag (default 12)")
    p.add_argument("--ellipse-levels", type=_floats, default=(0.05,),
                   help="significance levels of emitted ellipses (default 0.05)")
    p.add_argument("--kurtosis-reps", type=int, default=0,
                   help="simulations for the kurtosis check (default 0 = skip)")
    _add_run_args(p)
    _add_grid_args(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("power", help="size/power table of the three tests")
    p.add_argument("--H", type=_floats, default=(0.5, 0.54, 0.58, 0.62),
                   help="H values (default 0.5,0.54,0.58,0.62)")
    p.add_argument("--lam", type=_floats, default=(1.0, 1.04, 1.08, 1.12),
                   help="lambda values (default 1,1.04,1.08,1.12)")
    p.add_argument("--T", type=_ints, default=(2500, 5000), help="sample sizes (default 2500,5000)")
    p.add_argument("--reps", type=int, default=5000, help="cloud replications (default 5000)")
    p.add_argument("--outer", type=int, default=5000, help="outer replications (default 5000)")
    p.add_argument("--levels", type=_floats, default=DEFAULT_LEVELS,
                   help="significance levels (default 0.10,0.05,0.01)")
    p.add_argument("--seed", type=int, default=RunConfig.master_seed,
                   help=f"master seed (default {RunConfig.master_seed})")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default $MMAR_THREADS or 1)")
    _add_grid_args(p)
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("cloud", help="build or inspect reference clouds")
    csub = p.add_subparsers(dest="cloud_command", required=True)
    b = csub.add_parser("build", help="simulate a cloud and save it")
    b.add_argument("--T", type=int, required=True, help="sample length")
    b.add_argument("--reps", type=int, default=5000, help="replications (default 5000)")
    b.add_argument("--seed", type=int, default=RunConfig.master_seed,
                   help=f"master seed (default {RunConfig.master_seed})")
    b.add_argument("--ar", type=_ar_spec, default=None,
                   help='AR null as "lag:coef,..." (default: NIID null)')
    b.add_argument("--out", help="output file (default: cache directory)")
    b.add_argument("--cache-dir", help="cache directory (default $MMAR_CACHE_DIR)")
    b.add_argument("--jobs", type=int, default=None, help="worker processes (default $MMAR_THREADS or 1)")
    _add_grid_args(b)
    b.set_defaults(func=cmd_cloud_build)
    i = csub.add_parser("inspect", help="summarize a cloud file")
    i.add_argument("path")
    i.set_defaults(func=cmd_cloud_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
