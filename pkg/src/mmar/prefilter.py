"""Autoregressive pre-filtering of returns.

Fits an AR model on lags ``1..max_lag`` by OLS (no intercept, de-meaned
data), keeps lags significant at ``alpha`` and refits on those alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .series import LogReturnSeries

__all__ = ["ArFit", "fit_ar", "apply_filter"]


@dataclass(frozen=True)
class ArFit:
    """Selected AR model.

    ``tstats`` are from the full ``max_lag`` regression used for selection;
    ``refit_tstats`` from the final regression on the retained lags.
    """

    coefficients: dict
    retained_lags: tuple
    residuals: LogReturnSeries
    tstats: dict
    refit_tstats: dict = field(default_factory=dict)
    max_lag: int = 12
    alpha: float = 0.05

    @property
    def order(self) -> int:
        return max(self.retained_lags, default=0)


def _lag_matrix(x: np.ndarray, lags, start: int):
    X = np.column_stack([x[start - k:x.size - k] for k in lags])
    return X, x[start:]


def _ols(X: np.ndarray, y: np.ndarray):
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("AR regression is rank deficient (constant or degenerate series)")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = X.shape[0] - X.shape[1]
    s2 = resid @ resid / dof
    se = np.sqrt(s2 * np.diag(np.linalg.inv(X.T @ X)))
    return beta, beta / se, dof


def fit_ar(returns, max_lag: int = 12, alpha: float = 0.05) -> ArFit:
    """Select and fit the AR pre-filter for ``returns``."""
    r = np.asarray(returns, dtype=float)
    if r.size <= 10 * max_lag:
        raise ValueError(f"need more than {10 * max_lag} observations for max_lag={max_lag}")
    x = r - r.mean()
    lags = list(range(1, max_lag + 1))
    beta, t, dof = _ols(*_lag_matrix(x, lags, max_lag))
    pvals = 2.0 * stats.t.sf(np.abs(t), dof)
    kept = tuple(k for k, p in zip(lags, pvals) if p < alpha)
    coefficients, refit_t = {}, {}
    if kept:
        b2, t2, _ = _ols(*_lag_matrix(x, kept, max(kept)))
        coefficients = {k: float(b) for k, b in zip(kept, b2)}
        refit_t = {k: float(v) for k, v in zip(kept, t2)}
    fit = ArFit(coefficients, kept, LogReturnSeries(x, "filtered"),
                {k: float(v) for k, v in zip(lags, t)}, refit_t, max_lag, alpha)
    return ArFit(coefficients, kept, apply_filter(r, fit), fit.tstats, refit_t, max_lag, alpha)


def apply_filter(returns, fit: ArFit) -> LogReturnSeries:
    """``r_t - sum_k rho_k r_{t-k}`` on de-meaned data, re-centered to mean zero.

    The first ``fit.order`` observations are dropped.  With no retained lags
    the de-meaned input is returned unchanged.
    """
    r = np.asarray(returns, dtype=float)
    x = r - r.mean()
    p = fit.order
    if p == 0:
        return LogReturnSeries(x, "filtered")
    if x.size <= p:
        raise ValueError(f"series of length {x.size} is too short for AR order {p}")
    out = x[p:].copy()
    for k, rho in fit.coefficients.items():
        out -= rho * x[p - k:x.size - k]
    return LogReturnSeries(out - out.mean(), "filtered")
