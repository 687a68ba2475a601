import math

import numpy as np
import pytest

from shelab.estimators import (EstimatorError, MomentSeries, collect_fields_at,
                               effective_support_radius, first_moment_peak,
                               fit_lyapunov, holder_increment_exponent,
                               log_moment_convexity, mc_moments,
                               peak_concentration_ratio, rv_integral_check,
                               spatial_decay_fit, support_profile,
                               tail_mass_rate)
from shelab.kernel import heat_convolve
from shelab.model import Field, SigmaSpec, make_initial_data
from shelab.oracle import MomentField
from conftest import make_config


def series(times, values, stderrs=None):
    values = np.asarray(values, dtype=float)
    if stderrs is None:
        stderrs = np.zeros_like(values)
    return MomentSeries(times=np.asarray(times, dtype=float), kind="l2_sq",
                        k=None, estimates=values,
                        stderrs=np.asarray(stderrs, dtype=float), n_replicates=10)


class TestFitLyapunov:
    def test_exact_exponential(self):
        t = np.linspace(10, 20, 11)
        fit = fit_lyapunov(series(t, np.exp(0.125 * t)), (10, 20))
        assert fit.rate == pytest.approx(0.125, abs=1e-9)
        assert fit.residual < 1e-9

    def test_constant_series(self):
        t = np.linspace(0, 10, 11)
        fit = fit_lyapunov(series(t, np.full(11, 2.5)), (0, 10))
        assert fit.rate == pytest.approx(0.0, abs=1e-12)

    def test_window_needs_five_points(self):
        t = np.linspace(0, 10, 11)
        with pytest.raises(EstimatorError, match="5 snapshots"):
            fit_lyapunov(series(t, np.exp(t)), (0, 0.3))

    def test_nonpositive_rejected(self):
        t = np.linspace(0, 10, 11)
        vals = np.exp(t)
        vals[3] = 0.0
        with pytest.raises(EstimatorError, match="nonpositive"):
            fit_lyapunov(series(t, vals), (0, 10))

    def test_stderr_propagation(self):
        t = np.linspace(0, 10, 11)
        vals = np.exp(0.2 * t)
        fit0 = fit_lyapunov(series(t, vals), (0, 10))
        fit1 = fit_lyapunov(series(t, vals, stderrs=0.01 * vals), (0, 10))
        assert fit0.stderr == 0.0
        assert fit1.stderr > 0.0


class TestSpatialDecayFit:
    def test_exact_gaussian_profile(self):
        kappa, t = 1.0, 2.0
        xs = (np.arange(2048) + 0.5) * 0.02 - 20.48
        prof = MomentField(t=t, values=3.0 * np.exp(-xs**2 / (4 * kappa * t)),
                           dx=0.02)
        fit = spatial_decay_fit(prof, kappa)
        assert fit.slope == pytest.approx(-1 / (4 * kappa * t), rel=1e-9)
        assert fit.reference_slope == pytest.approx(-0.125)

    def test_flat_profile_rejected(self):
        xs_n = 2048
        prof = MomentField(t=1.0, values=np.full(xs_n, 0.5), dx=0.02)
        with pytest.raises(EstimatorError, match="not negative"):
            spatial_decay_fit(prof, 1.0)

    def test_too_few_usable_points(self):
        prof = MomentField(t=4.0, values=np.ones(8), dx=0.1)
        with pytest.raises(EstimatorError, match="usable"):
            spatial_decay_fit(prof, 1.0)


class TestEffectiveSupport:
    def test_symmetric_two_point_mass(self):
        nx, dx = 100, 0.1
        vals = np.zeros(nx)
        xs = (np.arange(nx) + 0.5) * dx - nx * dx / 2
        a = 2.05  # a grid |x| value
        vals[np.argmin(np.abs(xs - a))] = 1.0
        vals[np.argmin(np.abs(xs + a))] = 1.0
        prof = Field(t=0.0, values=vals, dx=dx)
        assert effective_support_radius(prof, 0.5) == pytest.approx(a)

    def test_monotone_in_q(self):
        nx, dx = 400, 0.05
        xs = (np.arange(nx) + 0.5) * dx - 10.0
        prof = Field(t=1.0, values=np.exp(-xs**2), dx=dx)
        assert (effective_support_radius(prof, 0.999)
                > effective_support_radius(prof, 0.99))

    def test_bad_quantile(self):
        prof = Field(t=0.0, values=np.ones(4), dx=0.1)
        with pytest.raises(EstimatorError):
            effective_support_radius(prof, 1.0)

    def test_no_mass(self):
        prof = Field(t=0.0, values=np.zeros(4), dx=0.1)
        with pytest.raises(EstimatorError, match="mass"):
            effective_support_radius(prof, 0.5)

    def test_support_profile_linear_radii(self):
        dx = 0.05
        nx = 4000
        xs = (np.arange(nx) + 0.5) * dx - 100.0
        fields = []
        for t in (1.0, 2.0, 3.0, 4.0):
            vals = np.where(np.abs(xs) <= 3 * t, 1.0, 0.0)
            fields.append(MomentField(t=t, values=vals, dx=dx))
        prof = support_profile(fields, q=0.9)
        assert prof.m_hat == pytest.approx(0.9 * 3.0, rel=0.05)
        assert prof.fit_residual < 0.1


class TestTailMassRate:
    def test_gaussian_rate_approaches_quarter_m_sq(self):
        m, t = 1.0, 400.0
        dx = 1.0
        nx = 2000
        xs = (np.arange(nx) + 0.5) * dx - 1000.0
        prof = MomentField(t=t, values=np.exp(-xs**2 / (4 * t)), dx=dx)
        times, rates = tail_mass_rate([prof], m)
        assert rates[0] == pytest.approx(-(m**2) / 4.0, abs=0.02)

    def test_m_zero_gives_total_mass_rate(self):
        prof = MomentField(t=2.0, values=np.full(100, 3.0), dx=0.1)
        times, rates = tail_mass_rate([prof], 0.0)
        assert rates[0] == pytest.approx(math.log(3.0 * 10.0) / 2.0)

    def test_zero_tail_is_minus_inf(self):
        nx, dx = 100, 0.1
        vals = np.zeros(nx)
        vals[50] = 1.0
        prof = MomentField(t=1.0, values=vals, dx=dx)
        times, rates = tail_mass_rate([prof], 3.0)
        assert rates[0] == -math.inf

    def test_truncation_rejected(self):
        prof = MomentField(t=10.0, values=np.ones(100), dx=0.1)  # x_max = 5
        with pytest.raises(EstimatorError, match="exceeds the domain"):
            tail_mass_rate([prof], 1.0)


class TestHolder:
    def test_smooth_field_flagged_too_smooth(self):
        dx = 0.01
        xs = (np.arange(1024) + 0.5) * dx - 5.12
        rows = np.vstack([np.exp(-xs**2), 1.1 * np.exp(-xs**2)])
        rep = holder_increment_exponent(rows, dx, t=1.0)
        assert rep.slope > 1.8
        assert rep.classification == "too_smooth"

    def test_white_noise_flagged_too_rough(self):
        rng = np.random.default_rng(5)
        rows = rng.normal(size=(8, 1024))
        rep = holder_increment_exponent(rows, 0.01, t=1.0, support_q=0.5)
        assert abs(rep.slope) < 0.2
        assert rep.classification == "too_rough"

    def test_brownian_profile_slope_one(self):
        # cumulative sums of iid increments have E|f(x+h)-f(x)|^2 ~ h
        rng = np.random.default_rng(11)
        dx = 0.01
        rows = np.cumsum(rng.normal(size=(64, 2048)) * math.sqrt(dx), axis=1)
        rep = holder_increment_exponent(rows, dx, t=1.0, support_q=0.5)
        assert 0.9 < rep.slope < 1.1
        assert rep.classification == "ok"

    def test_needs_three_lags(self):
        rows = np.ones((4, 128))
        with pytest.raises(EstimatorError, match="lags"):
            holder_increment_exponent(rows, 0.1, t=1.0, lag_cells=[2, 4])


class TestRvCheck:
    def test_reference_case_ratios_bounded(self):
        res = rv_integral_check(1.0, 1.0, [math.e, 10.0, 50.0, 100.0])
        assert np.all(res.ratios <= 10.0)
        assert res.ratios.argmax() == 0  # max at the smallest time
        assert np.all(res.integrals > 0)

    def test_ratio_not_growing_between_t_and_4t(self):
        res = rv_integral_check(1.0, 1.0, [5.0, 20.0])
        assert np.all(np.isfinite(res.ratios))
        assert res.ratios[1] < res.ratios[0]

    def test_small_t_integral_below_one(self):
        res = rv_integral_check(1.0, 1.0, [0.1])
        assert res.integrals[0] < 1.0

    def test_matches_mpmath_reference(self):
        import mpmath
        q, eta, t = 1.0, 1.0, 10.0
        ref = float(mpmath.quad(lambda z: mpmath.exp(z - q * z**(eta + 1) / t),
                                [1, mpmath.inf]))
        res = rv_integral_check(q, eta, [t])
        assert res.integrals[0] == pytest.approx(ref, rel=1e-8)

    def test_rejects_bad_parameters(self):
        with pytest.raises(EstimatorError):
            rv_integral_check(0.0, 1.0, [1.0])


class TestMcMoments:
    def test_noiseless_run_has_zero_stderr(self, triangle):
        cfg = make_config(sigma=SigmaSpec.linear(0.0), init=triangle,
                          nx=160, x_max=8.0, t_end=0.5,
                          snapshot_times=(0.25, 0.5))
        res = mc_moments(cfg, 16, kinds=("sup_sq", "l2_sq"))
        sup = res.series["sup_sq"]
        # identical replicates: variance vanishes up to one ulp of cancellation
        assert np.all(sup.stderrs <= 1e-8 * np.maximum(sup.estimates, 1e-300))
        u0 = make_initial_data(triangle, cfg)
        for t, est in zip(sup.times, sup.estimates):
            ref = heat_convolve(u0, t, cfg.kappa).values.max() ** 2
            assert est == pytest.approx(ref, rel=1e-2)

    def test_sup_dominates_mean(self, small_cfg):
        res = mc_moments(small_cfg, 32, kinds=("sup_sq", "l2_sq"))
        sup = res.series["sup_sq"].estimates
        l2 = res.series["l2_sq"].estimates
        assert np.all(sup >= l2 / (2 * small_cfg.x_max) - 1e-15)

    def test_thread_count_invariance(self, small_cfg):
        a = mc_moments(small_cfg, 64, kinds=("sup_sq", "pointwise_2"), threads=1)
        b = mc_moments(small_cfg, 64, kinds=("sup_sq", "pointwise_2"), threads=3)
        assert np.array_equal(a.series["sup_sq"].estimates,
                              b.series["sup_sq"].estimates)
        assert np.array_equal(a.series["pointwise_2"].estimates,
                              b.series["pointwise_2"].estimates)
        assert np.array_equal(a.series["pointwise_2"].stderrs,
                              b.series["pointwise_2"].stderrs)

    def test_jackknife_equals_classic_formula(self, small_cfg):
        res = mc_moments(small_cfg, 40, kinds=("l2_sq",))
        ser = res.series["l2_sq"]
        # recompute by brute force from individual replicates
        from shelab.solver import simulate_path
        vals = np.array([simulate_path(small_cfg, r).snapshots[-1].l2_sq()
                         for r in range(40)])
        jack = np.sqrt(np.sum((vals - vals.mean()) ** 2) / (40 * 39))
        assert ser.estimates[-1] == pytest.approx(vals.mean(), rel=1e-12)
        assert ser.stderrs[-1] == pytest.approx(jack, rel=1e-10)

    def test_all_failures_error(self, triangle):
        cfg = make_config(sigma=SigmaSpec.linear(1e30), init=triangle,
                          t_end=0.25, snapshot_times=(0.25,))
        with pytest.raises(EstimatorError, match="failed"):
            mc_moments(cfg, 8, kinds=("l2_sq",))

    def test_requires_snapshots_and_reps(self, triangle):
        bare = make_config(init=triangle, snapshot_times=())
        with pytest.raises(Exception):
            mc_moments(bare, 8, kinds=("l2_sq",))
        with pytest.raises(Exception):
            mc_moments(make_config(), 1, kinds=("l2_sq",))

    def test_unknown_kind_rejected(self, small_cfg):
        with pytest.raises(Exception, match="kind"):
            mc_moments(small_cfg, 4, kinds=("median",))


class TestPeaksAndConvexity:
    def test_noiseless_ratio_is_one(self, triangle):
        cfg = make_config(sigma=SigmaSpec.linear(0.0), init=triangle,
                          nx=256, x_max=12.8, t_end=1.0,
                          snapshot_times=(0.5, 1.0))
        ser = peak_concentration_ratio(cfg, 8)
        # grid max vs continuum peak differ by O(dx^2)
        assert np.allclose(ser.ratios, 1.0, atol=5e-3)

    def test_first_moment_peak_matches_grid_convolution(self, triangle):
        cfg = make_config(nx=2048, x_max=25.6)
        u0 = make_initial_data(triangle, cfg)
        for t in (0.5, 2.0):
            ref = heat_convolve(u0, t, 1.0).values.max()
            assert first_moment_peak(cfg, t) == pytest.approx(ref, abs=1e-4)
        assert first_moment_peak(cfg, 0.0) == 1.0

    def test_log_moment_convexity_lognormal(self):
        # ln E X^k = k^2/2 for lognormal(0,1): second difference exactly 1
        ks = np.array([1, 2, 3, 4])
        means = np.exp(ks**2 / 2.0)
        gaps, ses = log_moment_convexity(means, np.zeros(4))
        assert np.allclose(gaps, 1.0, rtol=1e-12)
        assert np.all(ses == 0.0)


class TestCollectFields:
    def test_matches_simulate_path(self, small_cfg):
        F = collect_fields_at(small_cfg, 6, small_cfg.t_end)
        from shelab.solver import simulate_path
        one = simulate_path(small_cfg, 4).snapshots[-1].values
        assert np.array_equal(F[4], one)


class TestHolderRateInterpolation:
    def test_endpoints_and_midpoint(self):
        from shelab.estimators import holder_rate_interpolation
        assert holder_rate_interpolation(0.125, 0.75, 1.0) == 0.125
        assert holder_rate_interpolation(0.125, 0.75, 2.0) == 0.75
        assert holder_rate_interpolation(0.125, 0.75, 1.5) == pytest.approx(
            0.5 * (0.125 + 0.75))

    def test_rejects_out_of_range(self):
        from shelab.estimators import holder_rate_interpolation
        with pytest.raises(EstimatorError):
            holder_rate_interpolation(0.1, 0.2, 2.5)
