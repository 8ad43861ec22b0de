"""Estimation and Monte Carlo testing of the multifractal model of asset returns."""

__version__ = "0.1.0"

from .cascade import CascadeParams, DeformationIncrements, build_cascade, build_cascade_dyadic
from .longmem import MmarParams, ma_weights, simulate_mmar, variance_scaling
from .mctest import (
    EstimateCloud,
    TestReport,
    build_cloud_ar,
    build_cloud_niid,
    fit_ellipse,
    joint_test,
    kurtosis_check,
    pvalue_H,
    pvalue_lambda,
    size_power_cell,
    test_point,
)
from .prefilter import ArFit, apply_filter, fit_ar
from .scaling import EstimationError, estimate, spectrum_curve, spectrum_from_tau
from .series import LogReturnSeries, PriceSeries, SeedSpec, cumulate, to_log_returns
