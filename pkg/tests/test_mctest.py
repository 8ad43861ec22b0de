import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import niid_cloud, power_cell
from mmar import mctest
from mmar.longmem import niid_series
from mmar.mctest import (
    CloudError,
    EstimateCloud,
    JointTester,
    build_cloud_ar,
    build_cloud_niid,
    check_stationary,
    cloud_fingerprint,
    ellipse_rejects,
    fit_ellipse,
    joint_test,
    kurtosis_check,
    pvalue_H,
    pvalue_lambda,
    simulate_ar,
)
from mmar.mctest import test_point as evaluate_point
from mmar.scaling import estimate
from mmar.series import SeedSpec


def synthetic_cloud(points):
    return EstimateCloud(np.asarray(points, dtype=float), "synthetic", 1000, 0, (1.0,), (1,))


def gaussian_cloud(n=5000, seed=0, corr=0.0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 2))
    H = 0.5 + 0.03 * z[:, 0]
    lam = 1.0 + 0.02 * (corr * z[:, 0] + np.sqrt(1 - corr**2) * z[:, 1])
    return synthetic_cloud(np.column_stack((H, lam)))


def mahalanobis(cloud, H, lam):
    x = cloud.points[:, ::-1]
    mu, prec = x.mean(0), np.linalg.inv(np.cov(x, rowvar=False))
    d = np.column_stack((lam, H)) - mu
    return np.einsum("ij,jk,ik->i", d, prec, d)


def test_pvalue_H_hand_counts():
    H = [0.4, 0.45, 0.55, 0.6]
    assert pvalue_H(H, 0.5) == 1.0
    assert pvalue_H(H, 0.58) == 0.5
    assert pvalue_H(H, 0.7) == 0.0
    assert pvalue_H(H, 0.1) == 0.0


def test_pvalue_lambda_hand_counts():
    lam = [0.95, 0.99, 1.01, 1.05]
    assert pvalue_lambda(lam, 1.0) == 0.5
    assert pvalue_lambda(lam, 0.5) == 1.0
    assert pvalue_lambda(lam, 1.5) == 0.0


def test_isotropic_cloud_gives_circle():
    rng = np.random.default_rng(1)
    e = fit_ellipse(synthetic_cloud(rng.standard_normal((5000, 2))), 0.05)
    assert e.gamma1 == 1.0
    assert abs(e.gamma3) < 0.1
    assert e.gamma2 == pytest.approx(e.gamma1, rel=0.1)


@pytest.mark.parametrize("p", [0.999, 0.5, 0.05, 0.001])
def test_ellipse_coverage(p):
    cloud = gaussian_cloud(corr=0.6)
    e = fit_ellipse(cloud, p)
    inside = e.value(cloud.lam, cloud.H) <= e.gamma0
    assert abs(inside.mean() - (1 - p)) <= 1.5 / cloud.reps


def test_ellipse_boundary_lies_on_conic():
    e = fit_ellipse(gaussian_cloud(corr=-0.4), 0.05)
    b = e.boundary(4001)
    assert_allclose(e.value(b[:, 0], b[:, 1]), e.gamma0, rtol=1e-9)
    lo, hi = e.lambda_range()
    assert lo == pytest.approx(b[:, 0].min(), abs=1e-3 * (hi - lo))
    H_lo, H_hi = e.H_range()
    assert H_hi == pytest.approx(b[:, 1].max(), abs=1e-3 * (H_hi - H_lo))


def test_joint_extremes():
    cloud = gaussian_cloud()
    assert joint_test(cloud, *cloud.points.mean(axis=0)) == 0.999
    assert joint_test(cloud, 2.0, 3.0) == 0.0


def test_region_geometry_matches_mahalanobis():
    cloud = gaussian_cloud(corr=0.5, seed=3)
    rng = np.random.default_rng(4)
    H = 0.5 + 0.12 * rng.standard_normal(1000)
    lam = 1.0 + 0.08 * rng.standard_normal(1000)
    dist = mahalanobis(cloud, H, lam)
    for p in (0.5, 0.05, 0.01):
        e = fit_ellipse(cloud, p)
        region = ellipse_rejects(e.gammas, e.gamma0, H, lam)
        assert_array_equal(region, dist > e.level)


def test_upper_region_is_high_lambda_part():
    cloud = gaussian_cloud(corr=0.5, seed=3)
    rng = np.random.default_rng(5)
    H = 0.5 + 0.12 * rng.standard_normal(2000)
    lam = 1.0 + 0.08 * rng.standard_normal(2000)
    e = fit_ellipse(cloud, 0.05)
    two = ellipse_rejects(e.gammas, e.gamma0, H, lam, "two")
    upper = ellipse_rejects(e.gammas, e.gamma0, H, lam, "upper")
    assert np.all(two[upper])
    H_lo, H_hi = e.H_range()
    low_side = (lam < e.lambda_range()[0]) & (H > H_lo) & (H < H_hi)
    assert not np.any(upper[low_side])
    assert np.all(upper[lam > e.lambda_range()[1]])
    with pytest.raises(ValueError):
        ellipse_rejects(e.gammas, e.gamma0, 0.5, 1.0, "left")


@settings(max_examples=100, deadline=None)
@given(H=st.floats(0.3, 0.7), lam=st.floats(0.9, 1.1), sided=st.sampled_from(["two", "upper"]))
def test_rejection_nested_across_levels(H, lam, sided):
    rejected = JointTester(gaussian_cloud(seed=7), sided).rejections(H, lam)
    # levels run from 0.999 down: once accepted, accepted at every smaller level
    first_accept = np.argmax(~rejected) if (~rejected).any() else rejected.size
    assert not rejected[first_accept:].any()
    assert rejected[:first_accept].all()


def test_joint_pvalue_tracks_distance_quantile():
    cloud = gaussian_cloud(seed=8)
    tester = JointTester(cloud)
    pts = np.random.default_rng(9).standard_normal((50, 2)) * [0.05, 0.03] + [0.5, 1.0]
    dist = mahalanobis(cloud, pts[:, 0], pts[:, 1])
    own = np.sort(mahalanobis(cloud, cloud.H, cloud.lam))
    for (H, lam), d in zip(pts, dist):
        share_beyond = 1 - np.searchsorted(own, d) / own.size
        assert abs(tester(H, lam) - share_beyond) <= 0.002


def test_singular_cloud_rejected():
    pts = np.column_stack((np.linspace(0.4, 0.6, 200), np.linspace(0.9, 1.1, 200)))
    with pytest.raises(ValueError, match="singular"):
        fit_ellipse(synthetic_cloud(pts), 0.05)
    with pytest.raises(ValueError):
        fit_ellipse(gaussian_cloud(), 1.0)
    with pytest.raises(ValueError):
        fit_ellipse(gaussian_cloud(n=50), 0.05)


def test_empty_ar_is_niid():
    seed = SeedSpec(31, 2)
    assert_array_equal(simulate_ar({}, 1000, seed), niid_series(1000, seed))


def test_ar_one_autocorrelation():
    x = simulate_ar({1: 0.3}, 20000, SeedSpec(31, 3))
    assert np.corrcoef(x[1:], x[:-1])[0, 1] == pytest.approx(0.3, abs=0.02)


def test_nonstationary_ar_rejected():
    with pytest.raises(ValueError, match="stationary"):
        simulate_ar({1: 1.01}, 100, SeedSpec(0))
    with pytest.raises(ValueError):
        check_stationary([0.5, 0.6])
    assert check_stationary([0.5, 0.0, -0.2]) == {1: 0.5, 3: -0.2}


def test_cloud_smoke_and_determinism():
    with pytest.warns(RuntimeWarning, match="replications"):
        a = build_cloud_niid(500, 100, seed=5, n_jobs=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = build_cloud_niid(500, 100, seed=5, n_jobs=2)
    assert a.reps == 100 and a.n_excluded == 0
    assert_array_equal(a.points, b.points)
    assert np.all((a.H > 0) & (a.H < 1))
    with pytest.raises(ValueError):
        build_cloud_niid(500, 50)


def test_cloud_replication_streams():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cloud = build_cloud_ar({1: 0.2}, 600, 100, seed=6)
    s = estimate(simulate_ar({1: 0.2}, 600, SeedSpec(6, 1)))
    assert cloud.points[0] == pytest.approx((s.H, s.lam), abs=1e-15)
    assert cloud.null_model == "AR(1:0.2)"


def test_failed_replications(monkeypatch):
    real = mctest._ar_replicate

    def flaky(every):
        return lambda r, **kw: None if r % every == 0 else real(r, **kw)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        monkeypatch.setattr(mctest, "_ar_replicate", flaky(100))
        cloud = build_cloud_niid(500, 200, seed=2, n_jobs=1)
        assert (cloud.reps, cloud.n_excluded, cloud.n_requested) == (198, 2, 200)
        monkeypatch.setattr(mctest, "_ar_replicate", flaky(50))
        with pytest.raises(CloudError):
            build_cloud_niid(500, 200, seed=2, n_jobs=1)


def test_fingerprint_covers_every_key():
    base = dict(null_model="NIID", ar_coeffs={}, T=2500, reps=5000, master_seed=0,
                qs=(1.0, 2.0), ns=(4, 8, 16))
    fp = cloud_fingerprint(**base)
    for change in [dict(null_model="AR(1:0.1)"), dict(ar_coeffs={1: 0.1}), dict(T=2501),
                   dict(reps=4999), dict(master_seed=1), dict(qs=(1.0, 2.5)), dict(ns=(4, 8, 17))]:
        assert cloud_fingerprint(**{**base, **change}) != fp


def test_pvalues_scale_invariant():
    cloud = gaussian_cloud(seed=10)
    x = niid_series(3000, SeedSpec(41, 1))
    a = estimate(x)
    b = estimate(1e-3 * x)
    ra = evaluate_point(cloud, a.H, a.lam)
    rb = evaluate_point(cloud, b.H, b.lam)
    assert (ra.p_H, ra.p_lambda, ra.p_joint) == (rb.p_H, rb.p_lambda, rb.p_joint)


def test_report_decisions():
    r = evaluate_point(gaussian_cloud(), 2.0, 3.0)
    assert r.p_joint == 0.0 and r.p_lambda == 0.0
    assert r.decisions()[0.05] == (True, True, True)
    assert set(r.as_dict()) == {"H_hat", "lambda_hat", "p_H", "p_lambda", "p_joint"}


def test_kurtosis_bounds():
    thin = kurtosis_check(1.0, 5000, 1000, 6.38)
    assert not thin.passed
    assert 3.0 < thin.upper_bound < 3.3
    fat = kurtosis_check(1.12, 5000, 1000, 3.0)
    assert fat.passed
    assert fat.upper_bound > thin.upper_bound
    with pytest.raises(ValueError):
        kurtosis_check(0.98, 5000, 10, 3.0)


@pytest.mark.slow
def test_null_size_and_uniformity():
    cell = power_cell(0.5, 1.0, 2500, 5000)
    assert_allclose(cell.rates["H"], (0.10, 0.05, 0.01), atol=0.015)
    grid = np.arange(1, 10) / 10
    for i, name in enumerate(("H", "lambda", "joint")):
        p = cell.pvalues[:1000, i]
        ecdf = np.array([np.mean(p <= g) for g in grid])
        assert np.max(np.abs(ecdf - grid)) < 0.05, name


@pytest.mark.slow
def test_lambda_power_at_1_08():
    assert power_cell(0.5, 1.08, 2500, 2000).rates["lambda"][1] == pytest.approx(0.820, abs=0.03)


@pytest.mark.slow
def test_joint_power_at_high_H():
    assert power_cell(0.62, 1.12, 5000, 2000).rates["joint"][1] == pytest.approx(0.996, abs=0.01)


@pytest.mark.slow
def test_cloud_ellipse_coverage():
    cloud = niid_cloud(2500)
    assert cloud.n_excluded <= 0.01 * cloud.n_requested
    e = fit_ellipse(cloud, 0.001)
    outside = e.value(cloud.lam, cloud.H) > e.gamma0
    assert abs(outside.sum() - 0.001 * cloud.reps) <= 2
