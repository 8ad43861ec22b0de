"""Price files, reference-cloud cache, and the batch test pipeline."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import kurtosis

from .mctest import (
    EstimateCloud,
    build_cloud_ar,
    build_cloud_niid,
    check_stationary,
    cloud_fingerprint,
    fit_ellipse,
    kurtosis_check,
    test_point,
    warn_if_coarse,
)
from .prefilter import fit_ar
from .scaling import DEFAULT_QS, default_scales, estimate, spectrum_curve
from .series import PriceSeries, to_log_returns

__all__ = [
    "PriceFileError",
    "load_price_csv",
    "write_price_csv",
    "save_cloud",
    "load_cloud",
    "CloudCache",
    "RunConfig",
    "SeriesResult",
    "run_pipeline",
    "MODES",
]

log = logging.getLogger(__name__)

MODES = ("filtered-niid", "unfiltered-ar")
CLOUD_FORMAT = "mmar-cloud/1"
MIN_ROWS = 100


class PriceFileError(ValueError):
    pass


def load_price_csv(path, start: Optional[dt.date] = None,
                   end: Optional[dt.date] = None) -> PriceSeries:
    """Read a ``date,price`` CSV with a header row.

    Dates must be ISO-8601 and strictly increasing.  ``start`` and ``end``
    (inclusive) restrict the sample.
    """
    path = Path(path)
    dates, prices = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise PriceFileError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise PriceFileError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                date = dt.date.fromisoformat(row[0].strip())
                price = float(row[1])
            except ValueError as exc:
                raise PriceFileError(f"{path}:{lineno}: cannot parse {row!r}: {exc}") from None
            if not np.isfinite(price) or price <= 0:
                raise PriceFileError(f"{path}:{lineno}: price must be positive, got {row[1]!r}")
            if dates:
                if date == dates[-1]:
                    raise PriceFileError(f"{path}:{lineno}: duplicate date {date}")
                if date < dates[-1]:
                    raise PriceFileError(f"{path}:{lineno}: dates not sorted ascending")
            dates.append(date)
            prices.append(price)
    if start is not None or end is not None:
        keep = [(d, p) for d, p in zip(dates, prices)
                if (start is None or d >= start) and (end is None or d <= end)]
        dates = [d for d, _ in keep]
        prices = [p for _, p in keep]
    if len(prices) < MIN_ROWS:
        warnings.warn(f"{path}: only {len(prices)} price rows", RuntimeWarning)
    if len(prices) < 2:
        raise PriceFileError(f"{path}: fewer than 2 prices in range")
    return PriceSeries(np.array(prices), tuple(dates))


def write_price_csv(target, prices: PriceSeries) -> None:
    """Write ``date,price`` rows to a path or an open text file."""
    stamps = prices.timestamps
    if stamps is None:
        origin = dt.date(2000, 1, 1)
        stamps = [origin + dt.timedelta(days=i) for i in range(len(prices))]
    if hasattr(target, "write"):
        _write_prices(target, stamps, prices.values)
    else:
        with Path(target).open("w", newline="") as fh:
            _write_prices(fh, stamps, prices.values)


def _write_prices(fh, stamps, values) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["date", "price"])
    for d, p in zip(stamps, values):
        w.writerow([d.isoformat(), repr(float(p))])


def save_cloud(cloud: EstimateCloud, path) -> None:
    doc = {
        "format": CLOUD_FORMAT,
        "fingerprint": cloud.fingerprint(),
        "key": cloud.key(),
        "n_excluded": cloud.n_excluded,
        "points": cloud.points.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_cloud(path) -> EstimateCloud:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CLOUD_FORMAT:
        raise ValueError(f"{path}: not a cloud file")
    key = doc["key"]
    return EstimateCloud(
        np.array(doc["points"], dtype=float).reshape(-1, 2),
        key["null_model"], key["T"], key["master_seed"],
        tuple(key["qs"]), tuple(key["ns"]),
        {int(k): float(v) for k, v in key["ar_coeffs"].items()},
        key["reps"], doc["n_excluded"],
    )


class CloudCache:
    """Directory of cloud files named by their fingerprint.

    Clouds are also kept in memory, so a batch without a cache directory
    still builds each distinct cloud once.
    """

    def __init__(self, directory=None):
        directory = directory or os.environ.get("MMAR_CACHE_DIR")
        self.directory = Path(directory) if directory else None
        self.hits = 0
        self.builds = 0
        self._memory = {}

    def get(self, ar_coeffs: dict, T: int, reps: int, seed: int, qs, ns,
            n_jobs: Optional[int] = None) -> EstimateCloud:
        ar_coeffs = check_stationary(ar_coeffs)
        name = _ar_name(ar_coeffs) if ar_coeffs else "NIID"
        fp = cloud_fingerprint(name, ar_coeffs, T, reps, seed, qs, ns)
        if fp in self._memory:
            self.hits += 1
            warn_if_coarse(reps)
            return self._memory[fp]
        path = self.directory / f"cloud_{fp}.json" if self.directory else None
        if path is not None and path.exists():
            cloud = load_cloud(path)
            if cloud.fingerprint() == fp:
                self.hits += 1
                warn_if_coarse(cloud.n_requested)
                self._memory[fp] = cloud
                return cloud
        if ar_coeffs:
            cloud = build_cloud_ar(ar_coeffs, T, reps, seed, qs, ns, n_jobs)
        else:
            cloud = build_cloud_niid(T, reps, seed, qs, ns, n_jobs)
        self.builds += 1
        self._memory[fp] = cloud
        if path is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            save_cloud(cloud, path)
        return cloud


def _ar_name(coeffs: dict) -> str:
    return "AR(" + ",".join(f"{k}:{v:.6g}" for k, v in coeffs.items()) + ")"


@dataclass
class RunConfig:
    """Settings for :func:`run_pipeline`.

    ``T`` is the cloud sample length; ``None`` uses the length of the series
    being tested.  ``qs``/``ns`` default to the estimator's grids.
    """

    inputs: Sequence[str] = ()
    start: Optional[dt.date] = None
    end: Optional[dt.date] = None
    qs: Sequence[float] = DEFAULT_QS
    ns: Optional[Sequence[int]] = None
    reps: int = 5000
    T: Optional[int] = None
    master_seed: int = 20150101
    mode: str = "filtered-niid"
    output_dir: Optional[str] = None
    cache_dir: Optional[str] = None
    max_lag: int = 12
    ellipse_levels: Sequence[float] = (0.05,)
    kurtosis_reps: int = 0
    n_jobs: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.reps < 100:
            raise ValueError("reps must be at least 100")
        if not len(self.qs) or (self.ns is not None and not len(self.ns)):
            raise ValueError("grids must be non-empty")


@dataclass
class SeriesResult:
    name: str
    H_hat: Optional[float] = None
    lambda_hat: Optional[float] = None
    p_H: Optional[float] = None
    p_lambda: Optional[float] = None
    p_joint: Optional[float] = None
    ar_lags: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    error: Optional[str] = None
    kurtosis: Optional[dict] = None
    cloud: Optional[EstimateCloud] = field(default=None, repr=False)
    summary: object = field(default=None, repr=False)

    def as_json(self) -> dict:
        out = {
            "H_hat": self.H_hat,
            "lambda_hat": self.lambda_hat,
            "p_H": self.p_H,
            "p_lambda": self.p_lambda,
            "p_joint": self.p_joint,
            "ar_lags": {str(k): v for k, v in self.ar_lags.items()},
            "warnings": list(self.warnings),
        }
        if self.error is not None:
            out["error"] = self.error
        if self.kurtosis is not None:
            out["kurtosis"] = self.kurtosis
        return out


def _series_name(path) -> str:
    return Path(path).stem


def _test_series(name: str, returns: np.ndarray, config: RunConfig,
                 cache: CloudCache) -> SeriesResult:
    res = SeriesResult(name)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ar = fit_ar(returns, config.max_lag)
        res.ar_lags = dict(ar.coefficients)
        if config.mode == "filtered-niid":
            x = ar.residuals.values
            null_coeffs = {}
        else:
            x = returns
            null_coeffs = dict(ar.coefficients)
        T = config.T or x.size
        ns = config.ns if config.ns is not None else default_scales(T)
        summary = estimate(x, config.qs, ns)
        cloud = cache.get(null_coeffs, T, config.reps, config.master_seed,
                          tuple(sorted(config.qs)), tuple(sorted(ns)), config.n_jobs)
        report = test_point(cloud, summary.H, summary.lam)
        if config.kurtosis_reps:
            lam = summary.lam if report.p_lambda < 0.05 else 1.0
            obs = float(kurtosis(x, fisher=False))
            kc = kurtosis_check(max(lam, 1.0), x.size, config.kurtosis_reps, obs,
                                seed=config.master_seed, n_jobs=config.n_jobs)
            res.kurtosis = {"observed": kc.observed, "upper_95": kc.upper_bound,
                            "lambda": kc.lam, "inside": kc.passed}
    res.warnings = [str(w.message) for w in caught] + list(summary.flags)
    res.H_hat, res.lambda_hat = summary.H, summary.lam
    res.p_H, res.p_lambda, res.p_joint = report.p_H, report.p_lambda, report.p_joint
    res.cloud, res.summary = cloud, summary
    return res


def format_report(results: Sequence[SeriesResult], mode: str) -> str:
    title = {
        "filtered-niid": "Filtered returns, critical values from NIID simulations",
        "unfiltered-ar": "Unfiltered returns, critical values from AR simulations",
    }[mode]
    width = max([len(r.name) for r in results] + [6])
    lines = [title, f"{'series':<{width}}  {'H_hat':>7} {'lam_hat':>7} {'p_H':>7} {'p_lam':>7} {'p_joint':>7}"]
    for r in results:
        if r.error is not None:
            lines.append(f"{r.name:<{width}}  error: {r.error}")
            continue
        lines.append(
            f"{r.name:<{width}}  {r.H_hat:7.3f} {r.lambda_hat:7.3f} "
            f"{r.p_H:7.3f} {r.p_lambda:7.3f} {r.p_joint:7.3f}"
        )
    return "\n".join(lines) + "\n"


def _write_xy(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows((repr(float(a)), repr(float(b))) for a, b in rows)


def run_pipeline(config: RunConfig, series: Optional[dict] = None) -> dict:
    """Estimate and test every input series; write reports if ``output_dir`` is set.

    ``series`` optionally supplies in-memory return arrays by name in
    addition to the CSV inputs.  Returns ``{name: SeriesResult}``; a series
    that fails carries ``error`` and does not stop the batch.
    """
    cache = CloudCache(config.cache_dir)
    inputs = {}
    for path in config.inputs:
        inputs[_series_name(path)] = path
    for name in (series or {}):
        inputs[name] = None

    results = {}
    for name, path in inputs.items():
        try:
            if path is None:
                returns = np.asarray(series[name], dtype=float)
            else:
                prices = load_price_csv(path, config.start, config.end)
                returns = to_log_returns(prices).values
            results[name] = _test_series(name, returns, config, cache)
        except Exception as exc:  # one bad series must not abort the batch
            log.warning("series %s failed: %s", name, exc)
            results[name] = SeriesResult(name, error=f"{type(exc).__name__}: {exc}")

    if config.output_dir:
        write_outputs(results, config)
    return results


def write_outputs(results: dict, config: RunConfig) -> None:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = list(results.values())
    (out / "report.json").write_text(
        json.dumps({r.name: r.as_json() for r in ordered}, indent=2, sort_keys=True))
    (out / "report.txt").write_text(format_report(ordered, config.mode))

    clouds = {}
    for r in ordered:
        if r.error is not None:
            continue
        _write_xy(out / f"spectrum_{r.name}.csv", ("alpha", "f_alpha"),
                  spectrum_curve(r.summary.tau1, tau2=r.summary.tau2))
        clouds.setdefault(r.cloud.fingerprint(), (r.cloud, []))[1].append(r.name)
    shared = len(clouds) == 1
    for cloud, names in clouds.values():
        for level in config.ellipse_levels:
            ell = fit_ellipse(cloud, level)
            tag = f"{level:g}" if shared else f"{names[0]}_{level:g}"
            _write_xy(out / f"ellipse_{tag}.csv", ("lambda", "H"), ell.boundary())
