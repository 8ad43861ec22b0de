import random
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from mmar.longmem import MmarParams, simulate_mmar
from mmar.scaling import (
    DEFAULT_QS,
    EstimationError,
    PartitionTable,
    block_increments,
    default_scales,
    estimate,
    partition_function,
    partition_table,
    scaling_regression,
    spectrum_curve,
    spectrum_from_tau,
)
from mmar.series import SeedSpec, cumulate


def brute_partition(p, n, q):
    """Both passes written out: blocks from observation 0, then from L."""
    T = len(p) - 1
    M = max(m for m in range(1, T + 1) if m * n <= T)
    L = T - n * M
    v = [abs(p[m * n] - p[(m - 1) * n]) for m in range(1, M + 1)]
    v += [abs(p[L + m * n] - p[L + (m - 1) * n]) for m in range(1, M + 1)]
    return 0.5 * sum(x**q for x in v), v


def test_linear_path():
    p = np.arange(13.0)  # T = 12, every 3-period increment is 3
    assert partition_function(p, 3, 2.0) == pytest.approx(36.0, abs=1e-12)


def test_second_pass_uses_tail():
    rng = np.random.default_rng(1)
    p = cumulate(rng.standard_normal(10))
    v, _ = block_increments(p, 3)
    _, v_oracle = brute_partition(p, 3, 1.0)
    assert_allclose(v, v_oracle, rtol=1e-15)
    assert_allclose(v[3:], [abs(p[4] - p[1]), abs(p[7] - p[4]), abs(p[10] - p[7])])
    for q in (0.5, 1.0, 2.5, 4.0):
        assert partition_function(p, 3, q) == pytest.approx(brute_partition(p, 3, q)[0], rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(8, 300), data=st.data())
def test_partition_matches_brute_force(T, data):
    n = data.draw(st.integers(1, T // 2))
    q = data.draw(st.sampled_from([0.5, 1.0, 1.5, 3.0, 5.0]))
    p = cumulate(np.random.default_rng(T).standard_normal(T))
    assert partition_function(p, n, q) == pytest.approx(brute_partition(p, n, q)[0], rel=1e-12)


def test_zeroth_moment_counts_cells():
    p = cumulate(np.random.default_rng(2).standard_normal(50))
    for n in (3, 7, 25):
        assert brute_partition(p, n, 0.0)[0] == 50 // n


def test_exact_division_passes_coincide():
    p = cumulate(np.random.default_rng(3).standard_normal(48))
    v, _ = block_increments(p, 6)
    assert_array_equal(v[:8], v[8:])
    assert partition_function(p, 6, 2.0) == pytest.approx(np.sum(v[:8] ** 2), rel=1e-14)


def test_scale_range_checked():
    p = np.arange(11.0)
    with pytest.raises(ValueError):
        partition_function(p, 6, 1.0)
    with pytest.raises(ValueError):
        partition_function(p, 2, 0.0)


def test_zero_increments_floored():
    r = np.array([0.01, 0.0, -0.02, 0.0] * 50)
    p = cumulate(r)
    with pytest.warns(RuntimeWarning):
        table = partition_table(p, (1.0, 2.0), (1, 2, 4))
    assert table.n_floored > 0
    assert np.all(np.isfinite(np.log(table.values)))


def exact_table(tau1, tau2, qs=DEFAULT_QS, ns=(2, 3, 5, 8, 13, 21, 34), T=1000):
    intercept = {q: 0.3 * q - 1.1 for q in qs}
    entries = {(q, n): np.exp(intercept[q] + (-1 + tau1 * q + tau2 * q * q) * np.log(n))
               for q in qs for n in ns}
    return PartitionTable.from_entries(entries, T), intercept


def test_regression_recovers_exact_model():
    table, intercept = exact_table(0.56, -0.03)
    fit = scaling_regression(table)
    assert fit.tau1 == pytest.approx(0.56, abs=1e-10)
    assert fit.tau2 == pytest.approx(-0.03, abs=1e-10)
    assert fit.rss < 1e-20
    for q, a in intercept.items():
        assert fit.intercepts[q] == pytest.approx(a, abs=1e-9)


def test_regression_ignores_entry_order():
    table, _ = exact_table(0.5, -0.01)
    noisy = {k: v * np.exp(0.01 * np.sin(7 * i)) for i, (k, v) in enumerate(table.entries())}
    items = list(noisy.items())
    random.Random(0).shuffle(items)
    a = scaling_regression(PartitionTable.from_entries(dict(noisy), 1000))
    b = scaling_regression(PartitionTable.from_entries(dict(items), 1000))
    assert (a.tau1, a.tau2, a.rss) == (b.tau1, b.tau2, b.rss)


def test_regression_rejects_rank_deficient():
    table, _ = exact_table(0.5, 0.0, ns=(4, 8))
    with pytest.raises(EstimationError):
        scaling_regression(table)
    table, _ = exact_table(0.5, 0.0, qs=(2.0,))
    with pytest.raises(EstimationError):
        scaling_regression(table)


def test_regression_on_null_series():
    t1, t2 = [], []
    for i in range(100):
        x = simulate_mmar(MmarParams(0.5, 1.0, 5000), SeedSpec(20, i)).values
        fit = scaling_regression(partition_table(cumulate(x)))
        t1.append(fit.tau1)
        t2.append(fit.tau2)
    assert np.mean(t1) == pytest.approx(0.5, abs=0.03)
    assert np.mean(t2) == pytest.approx(0.0, abs=0.01)


def test_reference_spectrum_geometry():
    s = spectrum_from_tau(0.56, -0.03)
    assert s.alpha0 == pytest.approx(0.56, abs=1e-12)
    assert s.H == pytest.approx(0.5, abs=1e-12)
    assert s.lam == pytest.approx(1.12, abs=1e-12)
    assert s.alpha1 == pytest.approx(0.44, abs=1e-12)
    assert s.alphaMin == pytest.approx(0.214, abs=1e-3)
    assert s.alphaMax == pytest.approx(0.906, abs=1e-3)
    assert s.alphaMin < s.alpha1 < s.alpha0 < s.alphaMax


def test_unifractal_spike():
    s = spectrum_from_tau(0.5, 0.0)
    assert (s.H, s.lam) == (0.5, 1.0)
    assert s.alpha0 == s.alpha1 == s.alphaMin == s.alphaMax == 0.5
    assert_array_equal(spectrum_curve(0.5, tau2=0.0), [[0.5, 1.0]])
    assert s.f(0.5) == 1.0 and s.f(0.6) == -np.inf


def test_ratio_form_of_H_agrees():
    for tau1, tau2 in [(0.56, -0.03), (0.5, 0.004), (0.61, -0.05), (0.48, 1e-6)]:
        ratio = 2 * tau2 / (np.sqrt(tau1**2 + 4 * tau2) - tau1)
        assert spectrum_from_tau(tau1, tau2).H == pytest.approx(ratio, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(H=st.floats(0.01, 0.99), lam=st.floats(1.0001, 1.999))
def test_round_trip(H, lam):
    s = spectrum_from_tau(lam * H, -(lam - 1) * H * H)
    assert s.H == pytest.approx(H, abs=1e-12)
    assert s.lam == pytest.approx(lam, abs=1e-12)


def test_invalid_discriminant():
    with pytest.raises(EstimationError, match="no real root"):
        spectrum_from_tau(0.4, -0.05)
    with pytest.raises(EstimationError):
        spectrum_from_tau(-0.1, 0.0)


def test_legendre_geometry():
    s = spectrum_from_tau(0.56, -0.03)
    curve = spectrum_curve(0.56, [s.alpha0, 0.44, s.alphaMin, s.alphaMax], tau2=-0.03)
    assert_allclose(curve[:, 1], [1.0, 0.88, 0.0, 0.0], atol=1e-10)
    assert curve[1, 1] == pytest.approx(s.alpha1 / s.H, abs=1e-10)
    # lower envelope of alpha q - tau(q), evaluated by brute force over q
    q = np.linspace(-20, 40, 600001)
    tau = -1 + 0.56 * q - 0.03 * q * q
    for a in (0.3, 0.44, 0.56, 0.8):
        assert np.min(a * q - tau) == pytest.approx(float(s.f(a)), abs=1e-8)


def test_scale_and_sign_invariance():
    x = simulate_mmar(MmarParams(0.5, 1.1, 3000), SeedSpec(21, 1)).values
    base = estimate(x)
    scaled = estimate(7.5 * x)
    flipped = estimate(-x)
    assert scaled.tau1 == pytest.approx(base.tau1, abs=1e-10)
    assert scaled.tau2 == pytest.approx(base.tau2, abs=1e-10)
    assert scaled.H == pytest.approx(base.H, abs=1e-10)
    assert scaled.lam == pytest.approx(base.lam, abs=1e-10)
    q, a = next(iter(base.fit.intercepts.items()))
    assert scaled.fit.intercepts[q] - a == pytest.approx(q * np.log(7.5), abs=1e-9)
    assert (flipped.H, flipped.lam) == pytest.approx((base.H, base.lam), abs=1e-12)


def test_ballistic_path_rejected():
    with pytest.raises(EstimationError):
        estimate(np.ones(5000))


def test_short_series_warns():
    x = np.random.default_rng(0).standard_normal(400)
    with pytest.warns(RuntimeWarning, match="short"):
        estimate(x)


def test_default_scales():
    ns = default_scales(5000)
    assert ns[0] == 4 and ns[-1] == 625
    assert len(ns) == len(set(ns)) == 20
    assert max(default_scales(40)) <= 20


def mc_estimates(lam, seeds, master):
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in seeds:
            try:
                s = estimate(simulate_mmar(MmarParams(0.5, lam, 5000), SeedSpec(master, i)))
            except EstimationError:
                continue
            out.append((s.H, s.lam))
    return np.array(out)


def test_consistency_under_null():
    est = mc_estimates(1.0, range(200), 22)
    assert est[:, 1].mean() == pytest.approx(1.0, abs=0.02)
    assert est[:, 0].mean() == pytest.approx(0.5, abs=0.02)


@pytest.mark.xfail(strict=True, reason="default scale grid is calibrated to the power tables; it leaves "
                   "mean H-hat near 0.477 and lambda-hat near 1.147; see decisions ledger")
def test_consistency_multifractal():
    est = mc_estimates(1.12, range(200), 23)
    assert est[:, 1].mean() == pytest.approx(1.12, abs=0.02)
    assert est[:, 0].mean() == pytest.approx(0.5, abs=0.02)


def test_short_scale_grid_is_less_biased():
    ns = tuple(np.unique(np.round(np.geomspace(2, 250, 20)).astype(int)))
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in range(200):
            try:
                s = estimate(simulate_mmar(MmarParams(0.5, 1.12, 5000), SeedSpec(23, i)), ns=ns)
            except EstimationError:
                continue
            out.append((s.H, s.lam))
    est = np.array(out)
    assert est[:, 1].mean() == pytest.approx(1.12, abs=0.02)
    assert est[:, 0].mean() == pytest.approx(0.5, abs=0.02)


def test_multifractal_separated_from_null():
    est = mc_estimates(1.12, range(200), 23)
    null = mc_estimates(1.0, range(200), 22)
    assert 1.08 < np.median(est[:, 1]) < 1.16
    assert np.mean(est[:, 1] > np.quantile(null[:, 1], 0.95)) > 0.8
