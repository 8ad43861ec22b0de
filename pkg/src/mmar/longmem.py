"""Fractionally integrated returns compounded with multifractal trading time."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.signal import fftconvolve

from .cascade import CascadeParams, build_cascade
from .series import LogReturnSeries, SeedSpec

__all__ = [
    "MmarParams",
    "MaWeights",
    "ma_weights",
    "simulate_mmar",
    "niid_series",
    "variance_scaling",
    "scaling_slope",
    "DEFAULT_TRUNCATION",
    "INNOVATION_STREAM",
]

DEFAULT_TRUNCATION = 1000
INNOVATION_STREAM = 1


@dataclass(frozen=True)
class MmarParams:
    H: float
    lam: float
    T: int

    def __post_init__(self):
        if not 0.0 < self.H < 1.0:
            raise ValueError(f"H must lie in (0, 1), got {self.H!r}")
        if not self.lam >= 1.0:
            raise ValueError(f"lambda must be >= 1, got {self.lam!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T!r}")
        object.__setattr__(self, "T", int(self.T))

    @property
    def d(self) -> float:
        return self.H - 0.5


@dataclass(frozen=True)
class MaWeights:
    weights: np.ndarray
    d: float

    def __len__(self):
        return self.weights.size


def ma_weights(d: float, J: int) -> MaWeights:
    """First ``J + 1`` moving-average weights of ``(1 - L)**(-d)``.

    Uses ``psi_j = psi_{j-1} * (d + j - 1) / j`` with ``psi_0 = 1``.
    """
    if not -0.5 < d < 0.5:
        raise ValueError(f"d must lie in (-0.5, 0.5) for stationarity, got {d!r}")
    if int(J) != J or J < 1:
        raise ValueError(f"truncation J must be a positive integer, got {J!r}")
    J = int(J)
    psi = np.empty(J + 1)
    psi[0] = 1.0
    for j in range(1, J + 1):
        psi[j] = psi[j - 1] * (d + j - 1) / j
    psi.setflags(write=False)
    return MaWeights(psi, float(d))


def simulate_mmar(params: MmarParams, seed: SeedSpec,
                  J: int = DEFAULT_TRUNCATION) -> LogReturnSeries:
    """Simulate ``T`` log returns with Hurst exponent ``H`` and multifractality ``lam``.

    Innovations ``u_t ~ N(0, dtheta_t)`` are drawn over ``T + J`` periods of
    cascade trading time and passed through the truncated fractional filter;
    the first ``J`` periods are burn-in.  Standard normal draws come from the
    innovation sub-stream of ``seed``, so changing ``H`` alone changes only
    the filter.
    """
    T, n = params.T, params.T + J
    dtheta = build_cascade(CascadeParams(params.lam, n), seed).values
    z = seed.generator(INNOVATION_STREAM).standard_normal(n)
    u = np.sqrt(dtheta) * z
    if params.d == 0.0:
        out = u[J:]
    else:
        psi = ma_weights(params.d, J).weights
        out = fftconvolve(u, psi)[J:n]
    return LogReturnSeries(out, origin="simulated")


def niid_series(T: int, seed: SeedSpec, J: int = DEFAULT_TRUNCATION) -> np.ndarray:
    """Standard normal series equal to ``simulate_mmar`` at ``H = 0.5, lam = 1``.

    Skips the (trivial) cascade, which makes it the cheap path for null clouds.
    """
    return seed.generator(INNOVATION_STREAM).standard_normal(T + J)[J:]


def variance_scaling(returns, scales: Iterable[int]) -> np.ndarray:
    """Sample variance of non-overlapping ``n``-period returns for each scale.

    Returns an array of rows ``(n, var)`` sorted by ``n``.
    """
    r = np.asarray(returns, dtype=float)
    scales = sorted({int(n) for n in scales})
    if not scales or scales[0] < 1:
        raise ValueError("scales must be positive integers")
    if scales[-1] > r.size / 10:
        raise ValueError(f"largest scale {scales[-1]} exceeds length/10 = {r.size / 10:g}")
    rows = []
    for n in scales:
        M = r.size // n
        agg = r[:M * n].reshape(M, n).sum(axis=1)
        dev = agg - agg[0]  # shifted data: exact zero for constant input
        rows.append((n, (dev @ dev - dev.sum() ** 2 / M) / (M - 1)))
    return np.array(rows)


def scaling_slope(table: np.ndarray) -> float:
    """OLS slope of ``ln var`` on ``ln n``; ``2H`` under exact self-similarity."""
    table = np.asarray(table, dtype=float)
    return float(np.polyfit(np.log(table[:, 0]), np.log(table[:, 1]), 1)[0])
