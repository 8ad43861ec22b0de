"""Monte Carlo reference clouds and the tests of H = 0.5, lambda = 1 and both jointly.

A cloud is a set of ``(H, lambda)`` estimates from series simulated under a
null model.  The H test is two-sided, the lambda test one-sided (upper), and
the joint test scans confidence ellipses of the cloud from the 0.999 level
down to 0.001 and reports the first level at which the point is accepted.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.signal import lfilter
from scipy.stats import kurtosis

from .cascade import CascadeParams, build_cascade
from .longmem import INNOVATION_STREAM, MmarParams, niid_series, simulate_mmar
from .scaling import DEFAULT_QS, EstimationError, default_scales, estimate
from .series import SeedSpec

__all__ = [
    "EstimateCloud",
    "ConicEllipse",
    "TestReport",
    "CloudError",
    "JOINT_LEVELS",
    "simulate_ar",
    "build_cloud_niid",
    "build_cloud_ar",
    "pvalue_H",
    "pvalue_lambda",
    "fit_ellipse",
    "ellipse_rejects",
    "joint_test",
    "test_point",
    "size_power_cell",
    "kurtosis_check",
]

log = logging.getLogger(__name__)

BURN_IN_STREAM = 2
AR_BURN_IN = 500
MAX_EXCLUDED_FRACTION = 0.01
# significance levels scanned by the joint test: 0.999, 0.998, ..., 0.001
JOINT_LEVELS = np.round(1.0 - 0.001 * np.arange(1, 1000), 3)
DEFAULT_LEVELS = (0.10, 0.05, 0.01)


class CloudError(RuntimeError):
    """Too many replications failed while building a reference cloud."""


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("MMAR_THREADS", "1")))
    except ValueError:
        return 1


def _map(func: Callable, indices: Sequence[int], n_jobs: Optional[int]) -> list:
    """``[func(i) for i in indices]``, optionally across processes; order kept."""
    n_jobs = default_jobs() if n_jobs is None else max(1, int(n_jobs))
    if n_jobs == 1 or len(indices) < 2 * n_jobs:
        return [func(i) for i in indices]
    chunk = max(1, len(indices) // (8 * n_jobs))
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(func, indices, chunksize=chunk))


def _normalize_ar(ar_coeffs) -> dict:
    coeffs = getattr(ar_coeffs, "coefficients", ar_coeffs)
    if coeffs is None:
        return {}
    if not isinstance(coeffs, Mapping):
        coeffs = {k + 1: c for k, c in enumerate(coeffs)}
    return {int(k): float(v) for k, v in sorted(coeffs.items()) if float(v) != 0.0}


def _ar_polynomial(coeffs: dict) -> np.ndarray:
    p = max(coeffs)
    a = np.zeros(p + 1)
    a[0] = 1.0
    for k, rho in coeffs.items():
        a[k] = -rho
    return a


def check_stationary(ar_coeffs) -> dict:
    """Return normalized coefficients; raise if the AR recursion is explosive."""
    coeffs = _normalize_ar(ar_coeffs)
    if any(k < 1 for k in coeffs):
        raise ValueError("AR lags must be >= 1")
    if coeffs:
        radius = np.max(np.abs(np.roots(_ar_polynomial(coeffs))))
        if not radius < 1.0:
            raise ValueError(f"AR coefficients are not stationary (spectral radius {radius:.4f})")
    return coeffs


def simulate_ar(ar_coeffs, T: int, seed: SeedSpec, burn_in: int = AR_BURN_IN) -> np.ndarray:
    """``r_t = sum_k rho_k r_{t-k} + u_t`` with NIID ``u_t`` after ``burn_in`` steps.

    The last ``T`` innovations equal :func:`niid_series` for the same seed, so
    an empty coefficient set reproduces the NIID null exactly.
    """
    coeffs = check_stationary(ar_coeffs)
    z = niid_series(T, seed)
    if not coeffs:
        return z
    burn = seed.generator(BURN_IN_STREAM).standard_normal(burn_in)
    return lfilter([1.0], _ar_polynomial(coeffs), np.concatenate((burn, z)))[burn_in:]


@dataclass(frozen=True)
class EstimateCloud:
    """Simulated ``(H, lambda)`` estimates under a null model.

    ``points`` has one row ``(H, lambda)`` per successful replication.
    """

    points: np.ndarray
    null_model: str
    T: int
    master_seed: int
    qs: tuple
    ns: tuple
    ar_coeffs: dict = field(default_factory=dict)
    n_requested: int = 0
    n_excluded: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("cloud points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if not self.n_requested:
            object.__setattr__(self, "n_requested", pts.shape[0] + self.n_excluded)

    @property
    def reps(self) -> int:
        return self.points.shape[0]

    @property
    def H(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def lam(self) -> np.ndarray:
        return self.points[:, 1]

    def key(self) -> dict:
        return {
            "null_model": self.null_model,
            "ar_coeffs": {str(k): v for k, v in self.ar_coeffs.items()},
            "T": int(self.T),
            "reps": int(self.n_requested),
            "master_seed": int(self.master_seed),
            "qs": [float(q) for q in self.qs],
            "ns": [int(n) for n in self.ns],
        }

    def fingerprint(self) -> str:
        return cloud_fingerprint(**{k: v for k, v in self.key().items()})


def cloud_fingerprint(null_model, ar_coeffs, T, reps, master_seed, qs, ns) -> str:
    payload = json.dumps(
        {
            "null_model": null_model,
            "ar_coeffs": {str(k): float(v) for k, v in dict(ar_coeffs).items()},
            "T": int(T),
            "reps": int(reps),
            "master_seed": int(master_seed),
            "qs": [float(q) for q in qs],
            "ns": [int(n) for n in ns],
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def warn_if_coarse(reps: int) -> None:
    if reps < 1000:
        warnings.warn(f"only {reps} replications; tail p-values will be coarse", RuntimeWarning)


def _estimate_point(x, qs, ns):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            s = estimate(x, qs, ns)
    except EstimationError:
        return None
    return s.H, s.lam


def _ar_replicate(r, coeffs, T, master_seed, qs, ns):
    return _estimate_point(simulate_ar(coeffs, T, SeedSpec(master_seed, r)), qs, ns)


def _build_cloud(coeffs: dict, T: int, reps: int, seed: int, qs, ns, n_jobs) -> EstimateCloud:
    if reps < 100:
        raise ValueError("a reference cloud needs at least 100 replications")
    warn_if_coarse(reps)
    qs = tuple(sorted(float(q) for q in qs))
    ns = tuple(sorted(int(n) for n in (default_scales(T) if ns is None else ns)))
    work = partial(_ar_replicate, coeffs=coeffs, T=T, master_seed=seed, qs=qs, ns=ns)
    results = _map(work, range(1, reps + 1), n_jobs)
    points = [r for r in results if r is not None]
    excluded = reps - len(points)
    if excluded > MAX_EXCLUDED_FRACTION * reps:
        raise CloudError(f"{excluded} of {reps} replications failed to estimate")
    if excluded:
        log.info("excluded %d failed replications", excluded)
    name = "NIID" if not coeffs else "AR(" + ",".join(f"{k}:{v:.6g}" for k, v in coeffs.items()) + ")"
    return EstimateCloud(np.array(points), name, T, seed, qs, ns, coeffs, reps, excluded)


def build_cloud_niid(T: int, reps: int = 5000, seed: int = 0, qs=DEFAULT_QS, ns=None,
                     n_jobs: Optional[int] = None) -> EstimateCloud:
    """Reference cloud from ``reps`` NIID(0, 1) series of length ``T``.

    Replication ``r`` (1-based) uses stream ``SeedSpec(seed, r)``.
    """
    return _build_cloud({}, T, reps, seed, qs, ns, n_jobs)


def build_cloud_ar(ar_coeffs, T: int, reps: int = 5000, seed: int = 0, qs=DEFAULT_QS,
                   ns=None, n_jobs: Optional[int] = None) -> EstimateCloud:
    """Reference cloud from AR series driven by NIID innovations.

    ``ar_coeffs`` is a mapping lag -> coefficient, a sequence for lags
    1, 2, ..., or an object with a ``coefficients`` mapping.
    """
    return _build_cloud(check_stationary(ar_coeffs), T, reps, seed, qs, ns, n_jobs)


def pvalue_H(cloud, H_hat: float) -> float:
    """Two-sided p-value ``2 min(pi, 1 - pi)``, ``pi`` = share of cloud above ``H_hat``."""
    H = cloud.H if isinstance(cloud, EstimateCloud) else np.asarray(cloud, dtype=float)
    pi = np.count_nonzero(H > H_hat) / H.size
    return float(2.0 * min(pi, 1.0 - pi))


def pvalue_lambda(cloud, lambda_hat: float) -> float:
    """One-sided p-value: share of cloud above ``lambda_hat``."""
    lam = cloud.lam if isinstance(cloud, EstimateCloud) else np.asarray(cloud, dtype=float)
    return float(np.count_nonzero(lam > lambda_hat) / lam.size)


@dataclass(frozen=True)
class ConicEllipse:
    """Ellipse ``g1 lam^2 + g2 H^2 + g3 lam H + g4 lam + g5 H = g0``, with ``g1 = 1``.

    ``center``, ``cov`` and ``level`` record the Mahalanobis form it came
    from: ``(x - center)' cov^-1 (x - center) = level`` with ``x = (lam, H)``.
    """

    gamma1: float
    gamma2: float
    gamma3: float
    gamma4: float
    gamma5: float
    gamma0: float
    p: float
    center: tuple = (0.0, 0.0)
    cov: np.ndarray = field(default=None, compare=False)
    level: float = 0.0

    @property
    def gammas(self) -> tuple:
        return self.gamma1, self.gamma2, self.gamma3, self.gamma4, self.gamma5

    def value(self, lam, H):
        g1, g2, g3, g4, g5 = self.gammas
        return g1 * lam**2 + g2 * H**2 + g3 * lam * H + g4 * lam + g5 * H

    def lambda_range(self):
        return _lambda_extremes(self.gammas, self.gamma0)

    def H_range(self):
        return _H_extremes(self.gammas, self.gamma0)

    def H_roots(self, lam):
        """Lower and upper boundary ``H`` at ``lam`` (nan outside the ellipse's span)."""
        g1, g2, g3, g4, g5 = self.gammas
        lam = np.asarray(lam, dtype=float)
        disc = _disc_in_H(self.gammas, self.gamma0, lam)
        root = np.sqrt(np.where(disc >= 0, disc, np.nan))
        b = g3 * lam + g5
        return (-b - root) / (2 * g2), (-b + root) / (2 * g2)

    def boundary(self, num: int = 361) -> np.ndarray:
        """``num`` points ``(lam, H)`` around the ellipse."""
        t = np.linspace(0.0, 2.0 * np.pi, num)
        chol = np.linalg.cholesky(np.asarray(self.cov) * self.level)
        circle = np.vstack((np.cos(t), np.sin(t)))
        return (np.asarray(self.center)[:, None] + chol @ circle).T


def _disc_in_H(g, g0, lam):
    g1, g2, g3, g4, g5 = g
    return (g3 * lam + g5) ** 2 - 4.0 * g2 * (g1 * lam**2 + g4 * lam - g0)


def _quadratic_roots(a, b, c):
    root = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    r1, r2 = (-b - root) / (2.0 * a), (-b + root) / (2.0 * a)
    return np.minimum(r1, r2), np.maximum(r1, r2)


def _lambda_extremes(g, g0):
    # the H-discriminant vanishes at the leftmost and rightmost points
    g1, g2, g3, g4, g5 = g
    return _quadratic_roots(g3 * g3 - 4 * g1 * g2, 2 * g3 * g5 - 4 * g2 * g4, g5 * g5 + 4 * g2 * g0)


def _H_extremes(g, g0):
    g1, g2, g3, g4, g5 = g
    return _quadratic_roots(g3 * g3 - 4 * g1 * g2, 2 * g3 * g4 - 4 * g1 * g5, g4 * g4 + 4 * g1 * g0)


def ellipse_rejects(g, g0, H_hat, lambda_hat, sided: str = "two"):
    """Whether ``(H_hat, lambda_hat)`` lies in the rejection region of the conic.

    ``g`` holds ``(g1, ..., g5)``; ``g0`` may be an array of levels, in which
    case the result is an array.  ``sided="two"`` rejects the whole exterior
    of the ellipse.  ``sided="upper"`` only rejects on the high-lambda side:
    outside the ellipse's H band, beyond its largest lambda, or outside the
    boundary to the right of the points where H is extreme.
    """
    g1, g2, g3, g4, g5 = g
    g0 = np.asarray(g0, dtype=float)
    H_min, H_max = _H_extremes(g, g0)
    lam_min, lam_max = _lambda_extremes(g, g0)
    disc = _disc_in_H(g, g0, lambda_hat)
    root = np.sqrt(np.maximum(disc, 0.0))
    b = g3 * lambda_hat + g5
    f1 = (-b - root) / (2.0 * g2)
    f2 = (-b + root) / (2.0 * g2)
    reject = (H_hat < H_min) | (H_hat > H_max) | (lambda_hat > lam_max)
    if sided == "two":
        inside_span = lambda_hat >= lam_min
        reject |= ~inside_span | (H_hat < f1) | (H_hat > f2)
    elif sided == "upper":
        lam1 = -(g3 * H_min + g4) / (2.0 * g1)
        lam2 = -(g3 * H_max + g4) / (2.0 * g1)
        reject |= (lambda_hat >= lam1) & (lambda_hat <= lam_max) & (H_hat < f1)
        reject |= (lambda_hat >= lam2) & (lambda_hat <= lam_max) & (H_hat > f2)
    else:
        raise ValueError("sided must be 'two' or 'upper'")
    return reject


def _moments(points: np.ndarray):
    x = points[:, ::-1]  # (lam, H)
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    if not np.linalg.det(cov) > 0 or np.linalg.cond(cov) > 1e12:
        raise ValueError("cloud covariance is singular")
    prec = np.linalg.inv(cov)
    dev = x - mu
    dist = np.einsum("ij,jk,ik->i", dev, prec, dev)
    return mu, cov, prec, dist


def _conic(mu, prec):
    a, h, b = prec[0, 0], prec[0, 1], prec[1, 1]
    ml, mh = mu
    g = (1.0, b / a, 2.0 * h / a, -2.0 * (a * ml + h * mh) / a, -2.0 * (b * mh + h * ml) / a)
    offset = (a * ml * ml + 2.0 * h * ml * mh + b * mh * mh) / a
    return g, offset, a


def fit_ellipse(cloud, p: float) -> ConicEllipse:
    """Confidence ellipse at significance ``p``.

    The ellipse is the Mahalanobis contour of the cloud's mean and covariance
    whose level is the ``(1 - p)`` quantile of the cloud's own distances, so
    a share ``1 - p`` of the cloud lies inside it.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    points = cloud.points if isinstance(cloud, EstimateCloud) else np.asarray(cloud, dtype=float)
    if points.shape[0] < 100:
        raise ValueError("fitting an ellipse needs at least 100 cloud points")
    mu, cov, prec, dist = _moments(points)
    c = float(np.quantile(dist, 1.0 - p))
    g, offset, a = _conic(mu, prec)
    return ConicEllipse(*g, gamma0=c / a - offset, p=float(p), center=tuple(mu), cov=cov, level=c)


class JointTester:
    """Joint test against a fixed cloud, with all 999 ellipse levels precomputed."""

    def __init__(self, cloud, sided: str = "two"):
        points = cloud.points if isinstance(cloud, EstimateCloud) else np.asarray(cloud, dtype=float)
        self.sided = sided
        self.mu, self.cov, self.prec, dist = _moments(points)
        self.levels = np.quantile(dist, 1.0 - JOINT_LEVELS)
        self.g, offset, a = _conic(self.mu, self.prec)
        self.gamma0 = self.levels / a - offset

    def rejections(self, H_hat: float, lambda_hat: float) -> np.ndarray:
        """Rejection flag at each level of :data:`JOINT_LEVELS`."""
        return ellipse_rejects(self.g, self.gamma0, H_hat, lambda_hat, self.sided)

    def __call__(self, H_hat: float, lambda_hat: float) -> float:
        rejected = self.rejections(H_hat, lambda_hat)
        accepted = np.flatnonzero(~rejected)
        return float(JOINT_LEVELS[accepted[0]]) if accepted.size else 0.0


def joint_test(cloud, H_hat: float, lambda_hat: float, sided: str = "two") -> float:
    """Joint p-value for ``H = 0.5, lambda = 1``.

    Scans ``p = 0.999, 0.998, ..., 0.001`` and returns the first ``p`` whose
    ellipse does not reject the point, or ``0.0`` if every level rejects.
    """
    return JointTester(cloud, sided)(H_hat, lambda_hat)


@dataclass(frozen=True)
class TestReport:
    H_hat: float
    lambda_hat: float
    p_H: float
    p_lambda: float
    p_joint: float
    levels: tuple = DEFAULT_LEVELS

    __test__ = False  # not a pytest class

    def decisions(self) -> dict:
        """``{level: (reject_H, reject_lambda, reject_joint)}``."""
        return {a: (self.p_H < a, self.p_lambda < a, self.p_joint < a) for a in self.levels}

    def as_dict(self) -> dict:
        return {
            "H_hat": self.H_hat,
            "lambda_hat": self.lambda_hat,
            "p_H": self.p_H,
            "p_lambda": self.p_lambda,
            "p_joint": self.p_joint,
        }


def test_point(cloud, H_hat: float, lambda_hat: float, sided: str = "two",
               tester: Optional[JointTester] = None) -> TestReport:
    """All three p-values for an estimate against ``cloud``."""
    tester = tester or JointTester(cloud, sided)
    return TestReport(
        float(H_hat), float(lambda_hat),
        pvalue_H(cloud, H_hat), pvalue_lambda(cloud, lambda_hat), tester(H_hat, lambda_hat),
    )


test_point.__test__ = False


def _mmar_replicate(r, H, lam, T, master_seed, qs, ns):
    x = simulate_mmar(MmarParams(H, lam, T), SeedSpec(master_seed, r))
    return _estimate_point(x.values, qs, ns)


@dataclass(frozen=True)
class PowerCell:
    H: float
    lam: float
    T: int
    levels: tuple
    rates: dict  # test name -> rejection rate per level
    n_outer: int
    n_excluded: int
    pvalues: np.ndarray = field(default=None, compare=False, repr=False)


def size_power_cell(H: float, lam: float, T: int, reps_outer: int, cloud: EstimateCloud,
                    levels: Sequence[float] = DEFAULT_LEVELS, seed: int = 1,
                    sided: str = "two", n_jobs: Optional[int] = None) -> PowerCell:
    """Rejection rates of the three tests for MMAR data at ``(H, lam)``.

    Outer series use streams ``SeedSpec(seed, r)``; pick ``seed`` different
    from the cloud's master seed.  A test rejects at level ``a`` when its
    p-value is below ``a``.
    """
    if cloud.T != T:
        raise ValueError(f"cloud was built at T = {cloud.T}, not {T}")
    work = partial(_mmar_replicate, H=H, lam=lam, T=T, master_seed=seed, qs=cloud.qs, ns=cloud.ns)
    results = [r for r in _map(work, range(1, reps_outer + 1), n_jobs) if r is not None]
    tester = JointTester(cloud, sided)
    pv = np.array([
        (pvalue_H(cloud, h), pvalue_lambda(cloud, l), tester(h, l)) for h, l in results
    ]).reshape(-1, 3)
    levels = tuple(levels)
    rates = {
        name: tuple(float(np.mean(pv[:, i] < a)) for a in levels)
        for i, name in enumerate(("H", "lambda", "joint"))
    }
    return PowerCell(H, lam, T, levels, rates, len(results), reps_outer - len(results), pv)


def _kurtosis_replicate(r, lam, T, master_seed):
    seed = SeedSpec(master_seed, r)
    dtheta = build_cascade(CascadeParams(lam, T), seed).values
    u = np.sqrt(dtheta) * seed.generator(INNOVATION_STREAM).standard_normal(T)
    return kurtosis(u, fisher=False)


@dataclass(frozen=True)
class KurtosisCheck:
    observed: float
    upper_bound: float
    lam: float
    passed: bool


def kurtosis_check(lambda_hat: float, T: int, reps: int, observed_kurtosis: float,
                   seed: int = 0, coverage: float = 0.95,
                   n_jobs: Optional[int] = None) -> KurtosisCheck:
    """Compare an observed (Pearson) kurtosis with its simulated upper bound.

    Simulates ``u_t ~ N(0, dtheta_t)`` with cascade trading time at
    ``lambda_hat`` and takes the ``coverage`` quantile of the sample
    kurtosis as a one-sided bound.
    """
    if lambda_hat < 1:
        raise ValueError("lambda must be >= 1; use 1 when the lambda test does not reject")
    work = partial(_kurtosis_replicate, lam=lambda_hat, T=T, master_seed=seed)
    k = np.array(_map(work, range(1, reps + 1), n_jobs))
    bound = float(np.quantile(k, coverage))
    return KurtosisCheck(float(observed_kurtosis), bound, float(lambda_hat),
                         bool(observed_kurtosis <= bound))
