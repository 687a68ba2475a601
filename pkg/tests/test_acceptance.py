"""Acceptance suite: one test per criterion, at the stated tolerances.

Expensive Monte Carlo and oracle runs are shared through module-scoped
fixtures; every test prints a one-line summary (visible with -s / -rA, and
automatically in the report for failures).  Criteria are evaluated exactly
as stated; where a stated figure is unattainable the test fails honestly
and its printed diagnostics carry the measured values.
"""

import math
import os

import numpy as np
import pytest
from scipy import integrate

import shelab.cli as cli
from shelab.estimators import (collect_fields_at, fit_lyapunov,
                               holder_increment_exponent, log_moment_convexity,
                               mc_moments, peak_concentration_ratio,
                               rv_integral_check, spatial_decay_fit,
                               support_profile, tail_mass_rate)
from shelab.kernel import (heat_convolve, heat_kernel, kernel_l2_norm_sq,
                           laplace_kernel_l2, lyapunov_threshold)
from shelab.estimators import MomentSeries
from shelab.model import SigmaSpec, SimConfig, load_config, make_initial_data
from shelab.oracle import (laplace_U_numeric, picard_moment_bound,
                           solve_second_moment_volterra)
from shelab.solver import picard_iterate

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def load(name):
    return load_config(os.path.join(CONFIG_DIR, name))


def note(line):
    print(f"[acceptance] {line}")


def mass_series(vol):
    return MomentSeries(times=vol.times_all, kind="l2_sq", k=None,
                        estimates=vol.l2_mass_all,
                        stderrs=np.zeros_like(vol.l2_mass_all),
                        n_replicates=1)


# --- shared expensive runs --------------------------------------------------

@pytest.fixture(scope="module")
def volterra_main():
    # PAM lambda=1, kappa=1, triangle K=1: x_max=60, nx=4096, dt=0.04, t=20
    return solve_second_moment_volterra(load("pam_oracle.cfg"))


@pytest.fixture(scope="module")
def mc_t1():
    cfg = load("pam_mc_t1.cfg")
    res = mc_moments(cfg, 10_000,
                     kinds=("sup_sq", "l2_sq", "pointwise_1", "pointwise_2",
                            "pointwise_3", "pointwise_4"))
    return cfg, res


@pytest.fixture(scope="module")
def oracle_t1():
    cfg = load("pam_mc_t1.cfg")
    ocfg = SimConfig(kappa=cfg.kappa, sigma=cfg.sigma, init=cfg.init,
                     x_max=cfg.x_max, nx=cfg.nx, dt=0.005, t_end=1.0,
                     snapshot_times=(), seed=0)
    return solve_second_moment_volterra(ocfg, times=[0.25, 0.5, 1.0])


@pytest.fixture(scope="module")
def mc_growth():
    cfg = load("pam_growth.cfg")
    res = mc_moments(cfg, 10_000, kinds=("sup_sq", "l2_sq"))
    return cfg, res


# --- criteria ----------------------------------------------------------------

def test_criterion_01_kernel_identities():
    mass, _ = integrate.quad(lambda z: heat_kernel(1.0, z, 1.0), -20, 20,
                             epsabs=1e-13, epsrel=1e-13)
    assert abs(mass - 1.0) < 1e-10

    for t, kappa in ((1.0, 1.0), (0.25, 2.0), (3.0, 0.5)):
        w = 20 * math.sqrt(4 * kappa * t)
        quad, _ = integrate.quad(lambda z: heat_kernel(t, z, kappa) ** 2, -w, w,
                                 epsabs=1e-14, epsrel=1e-12)
        assert kernel_l2_norm_sq(t, kappa) == pytest.approx(quad, rel=1e-8)
        assert kernel_l2_norm_sq(t, kappa) == pytest.approx(
            (8 * math.pi * kappa * t) ** -0.5, rel=1e-14)

    rng = np.random.default_rng(20090119)
    for _ in range(20):
        lam = 10.0 ** rng.uniform(-3, 3)
        kappa = 10.0 ** rng.uniform(-2, 2)
        assert laplace_kernel_l2(lam, kappa) * 2 * math.sqrt(2 * kappa * lam) == \
            pytest.approx(1.0, rel=1e-12)
    note("criterion 01 kernel identities: PASS")


def test_criterion_02_threshold_reproduction():
    assert lyapunov_threshold(1.0, 1.0) == 0.125

    for lip, kappa in ((1.0, 1.0), (1.25, 1.0), (0.75, 2.0)):
        lam_crit = lip**4 / (8 * kappa)
        at = picard_moment_bound(lam_crit, lip, kappa, 1.0, n=8)
        assert at.divergent and at.fixed_point is None
        above = picard_moment_bound(lam_crit * 1.01, lip, kappa, 2.5, n=8)
        assert not above.divergent
        q = lip**2 / (2 * math.sqrt(2 * kappa * lam_crit * 1.01))
        assert above.fixed_point == pytest.approx(2.5 / (1 - q), rel=1e-12)
    note("criterion 02 threshold reproduction: PASS")


def test_criterion_03_oracle_lyapunov_exponent(volterra_main):
    fit = fit_lyapunov(mass_series(volterra_main), (10.0, 20.0))
    rel = abs(fit.rate - 0.125) / 0.125
    note(f"criterion 03 oracle rate on [10,20]: {fit.rate:.5f} "
         f"(target 0.125, rel dev {rel:.2%})")
    assert rel < 0.05


def test_criterion_04a_laplace_finite_and_refinement_stable(volterra_main):
    u_coarse = laplace_U_numeric(volterra_main.fields, 0.1875)
    cfg = load("pam_oracle.cfg")
    fine_cfg = SimConfig(kappa=cfg.kappa, sigma=cfg.sigma, init=cfg.init,
                         x_max=cfg.x_max, nx=cfg.nx, dt=0.02, t_end=20.0,
                         snapshot_times=(), seed=0)
    u_fine = laplace_U_numeric(solve_second_moment_volterra(fine_cfg).fields, 0.1875)
    rel = abs(u_fine.value - u_coarse.value) / u_coarse.value
    note(f"criterion 04a U(0.1875): {u_coarse.value:.5f}, dt/2 -> "
         f"{u_fine.value:.5f} (rel {rel:.2e})")
    assert math.isfinite(u_coarse.value)
    assert rel < 0.01


def test_criterion_04b_laplace_divergence_signature(volterra_main):
    cfg = load("pam_oracle.cfg")
    cfg30 = SimConfig(kappa=cfg.kappa, sigma=cfg.sigma, init=cfg.init,
                      x_max=cfg.x_max, nx=cfg.nx, dt=cfg.dt, t_end=30.0,
                      snapshot_times=(), seed=0)
    u20 = laplace_U_numeric(volterra_main.fields, 0.0875)
    u30 = laplace_U_numeric(solve_second_moment_volterra(cfg30).fields, 0.0875)
    ratio = u30.value / u20.value
    note(f"criterion 04b U(0.0875): t_end 20 -> {u20.value:.4f}, "
         f"t_end 30 -> {u30.value:.4f}, growth x{ratio:.3f} "
         f"(tail warnings {u20.tail_warning}/{u30.tail_warning})")
    note("criterion 04b analysis: with growth rate 0.125 the integrand grows "
         "like exp(0.0375 t), bounding the 20->30 integral ratio near 2; "
         "the stated 3x is unattainable for these parameters (see ledger)")
    assert u20.tail_warning and u30.tail_warning  # transform not converged
    assert ratio > 3.0


def test_criterion_05_mc_vs_oracle_pointwise(mc_t1, oracle_t1):
    cfg, res = mc_t1
    est, se = res.series["pointwise_2"].at_time(1.0)
    f1 = [f for f in oracle_t1.fields if abs(f.t - 1.0) < 1e-9][0]
    sel = np.abs(res.series["pointwise_2"].xs) <= 5.0
    z = np.abs(est[sel] - f1.values[sel]) / np.where(se[sel] > 0, se[sel], 1.0)
    note(f"criterion 05 MC vs Volterra at t=1: max |z| = {z.max():.2f} over "
         f"{sel.sum()} grid points (limit 4)")
    assert z.max() <= 4.0


def test_criterion_06_mc_sup_moment_growth(mc_growth):
    cfg, res = mc_growth
    fit = fit_lyapunov(res.series["sup_sq"], (8.0, 16.0))
    note(f"criterion 06 sup-moment rate on [8,16]: {fit.rate:.4f} "
         f"+- {fit.stderr:.4f} (band [0.08, 0.17]); the plain-mean estimator "
         f"loses the heavy-tail mass at N=1e4 (exact scheme rate 0.117, see ledger)")
    assert 0.08 <= fit.rate <= 0.17


def test_criterion_07_sandwich_modulated():
    cfg = load("modulated_growth.cfg")
    res = mc_moments(cfg, 2000, kinds=("sup_sq",))
    fit = fit_lyapunov(res.series["sup_sq"], (7.0, 14.0))
    lo = 0.75**4 / 8.0
    hi = 1.25**4 / 8.0
    w = 0.5 * (1.25**4 - 0.75**4) / 8.0
    note(f"criterion 07 modulated sup rate: {fit.rate:.4f} in "
         f"[{lo - w:.4f}, {hi + w:.4f}]")
    assert lo - w <= fit.rate <= hi + w


def test_criterion_08_effective_support(volterra_main):
    fields = [f for f in volterra_main.fields if 4.0 - 1e-9 <= f.t]
    prof = support_profile(fields, q=0.99)
    rng = prof.radii.max() - prof.radii.min()
    frac = prof.fit_residual / rng
    note(f"criterion 08 support radii fit: m_hat={prof.m_hat:.3f}, "
         f"residual {frac:.2%} of range (limit 10%)")
    assert frac < 0.10

    sup_cfg = load("pam_support.cfg")
    vol = solve_second_moment_volterra(sup_cfg,
                                       times=[float(t) for t in range(8, 21, 2)])
    times, rates = tail_mass_rate(vol.fields, m=4.0)
    note(f"criterion 08 tail rates at m=4: "
         f"{[round(r, 2) for r in rates.tolist()]} (all < 0 required)")
    assert np.all(rates < 0.0)

    # definition part (a): mass inside m_hat * t carries the growth
    inside = []
    for f in fields:
        m_in = f.dx * float(np.sum(f.values[np.abs(f.xs) <= prof.m_hat * f.t]))
        inside.append(math.log(m_in) / f.t)
    assert inside[-1] > 0.0


def test_criterion_09_gaussian_spatial_decay(volterra_main):
    f4 = [f for f in volterra_main.fields if abs(f.t - 4.0) < 1e-9][0]
    fit = spatial_decay_fit(f4, kappa=1.0)
    ratio = fit.slope / fit.reference_slope
    note(f"criterion 09 decay fit at t=4: slope {fit.slope:.5f}, reference "
         f"-1/(4 kappa t) = {fit.reference_slope:.5f}, ratio {ratio:.3f} "
         f"(allowed [0.5, 2])")
    assert fit.slope < 0.0
    assert 0.5 <= ratio <= 2.0


def test_criterion_10_holder_exponent():
    cfg = load("pam_holder.cfg")
    fields = collect_fields_at(cfg, 200, 4.0)
    rep = holder_increment_exponent(fields, cfg.dx, 4.0)
    note(f"criterion 10 increment log-log slope: {rep.slope:.3f} "
         f"(band [0.8, 1.2]; smallest lag excluded: {rep.excluded_smallest})")
    assert 0.8 <= rep.slope <= 1.2


def test_criterion_11_intermittency_ratio():
    cfg = load("pam_peaks.cfg")
    ser = peak_concentration_ratio(cfg, 1000)
    r2 = ser.ratios[list(ser.times).index(2.0)]
    r12 = ser.ratios[list(ser.times).index(12.0)]
    quotient = r12 / r2
    note(f"criterion 11 peak ratio: t=2 -> {r2:.2f}, t=12 -> {r12:.2f}, "
         f"quotient {quotient:.2f} (need >= 10)")
    assert quotient >= 10.0


def test_criterion_12_positivity(mc_t1, mc_growth):
    for name, (cfg, res) in (("t=1 run", mc_t1), ("growth run", mc_growth)):
        worst = float(res.neg_mass_fraction.max())
        note(f"criterion 12 positivity ({name}): worst negative-mass "
             f"fraction {worst:.2e} (limit 1e-2)")
        assert worst < 0.01


def test_criterion_13_picard_convergence():
    cfg = load("picard_small.cfg")
    res = picard_iterate(cfg, replicate_index=0, n_iters=9)
    d = res.l2_diffs
    note(f"criterion 13 picard diffs: {[f'{x:.2e}' for x in d]}; "
         f"d8/d2 = {d[7] / d[1]:.2e}")
    for n in range(5):
        assert d[n + 1] < d[n], f"d_{n + 2} >= d_{n + 1}"
    assert d[7] / d[1] < 0.1


def test_criterion_14_slowly_varying_integral():
    res = rv_integral_check(1.0, 1.0, [math.e, 10.0, 50.0, 100.0])
    note(f"criterion 14 rv ratios: {[round(r, 4) for r in res.ratios.tolist()]} "
         f"(all <= 10)")
    assert np.all(res.ratios <= 10.0)
    assert res.ratios.argmax() == 0


def test_criterion_15_determinism_across_threads(tmp_path):
    cfg = os.path.join(CONFIG_DIR, "pam_mc_t1.cfg")
    bodies = []
    for threads in (1, 4, 8):
        d = tmp_path / f"threads{threads}"
        rc = cli.main(["moments", "--config", cfg, "--reps", "256",
                       "--kinds", "sup_sq,l2_sq,pointwise_2",
                       "--threads", str(threads), "--out", str(d)])
        assert rc == 0
        chunk = {}
        for name in sorted(os.listdir(d)):
            if name.endswith(".csv"):
                chunk[name.rsplit("_", 1)[0]] = (d / name).read_bytes()
        bodies.append(chunk)
    assert bodies[0] == bodies[1] == bodies[2]
    note("criterion 15 determinism across threads {1,4,8}: byte-identical PASS")


# --- cross-cutting MC invariants tied to the shared runs ---------------------

def test_invariant_first_moment_identity(mc_t1):
    cfg, res = mc_t1
    est, se = res.series["pointwise_1"].at_time(1.0)
    u0 = make_initial_data(cfg.init, cfg)
    # against the continuum convolution on the resolved region (the far
    # tail holds ~1e-11 values where truncation dominates the tiny stderr)
    ref = heat_convolve(u0, 1.0, cfg.kappa).values
    sel = np.abs(u0.xs) <= 5.0
    z = np.abs(est - ref) / np.where(se > 0, se, 1.0)
    note(f"first-moment identity max |z| over |x|<=5: {z[sel].max():.2f} (limit 4)")
    assert z[sel].max() <= 4.0
    # and against the scheme's exact mean (noiseless run) at every grid point
    noiseless = SimConfig(kappa=cfg.kappa, sigma=SigmaSpec.linear(0.0),
                          init=cfg.init, x_max=cfg.x_max, nx=cfg.nx,
                          dt=cfg.dt, t_end=1.0, snapshot_times=(1.0,), seed=1)
    from shelab.solver import simulate_path
    exact = simulate_path(noiseless, 0).snapshots[0].values
    z_all = np.abs(est - exact) / np.where(se > 0, se, 1.0)
    note(f"first-moment vs exact scheme mean, max |z| everywhere: {z_all.max():.2f}")
    assert z_all.max() <= 4.5


def test_invariant_log_moment_convexity(mc_t1):
    cfg, res = mc_t1
    i0 = int(np.argmin(np.abs(res.series["pointwise_2"].xs)))
    means, ses = [], []
    for k in (1, 2, 3, 4):
        est, se = res.series[f"pointwise_{k}"].at_time(1.0)
        means.append(est[i0])
        ses.append(se[i0])
    gaps, gse = log_moment_convexity(means, ses)
    note(f"log-moment convexity gaps at x~0: {np.round(gaps, 3).tolist()} "
         f"+- {np.round(2 * gse, 3).tolist()}")
    assert np.all(gaps >= -2.0 * gse)


def test_invariant_sup_and_l2_rates_agree(mc_growth):
    cfg, res = mc_growth
    f_sup = fit_lyapunov(res.series["sup_sq"], (8.0, 16.0))
    f_l2 = fit_lyapunov(res.series["l2_sq"], (8.0, 16.0))
    gap = abs(f_sup.rate - f_l2.rate)
    bound = 3.0 * math.hypot(f_sup.stderr, f_l2.stderr)
    note(f"sup/l2 rate agreement: |{f_sup.rate:.4f} - {f_l2.rate:.4f}| = "
         f"{gap:.4f} <= {bound:.4f}")
    assert gap <= bound


def test_invariant_pointwise_growth_bounded(volterra_main):
    # gamma_bar(2) surrogate: center growth rate below 1.3 * Lip^4/(8 kappa)
    center = [f.values[len(f.values) // 2] for f in volterra_main.fields]
    times = np.array([f.t for f in volterra_main.fields])
    sel = times >= 10.0
    rate = np.polyfit(times[sel], np.log(np.array(center)[sel]), 1)[0]
    note(f"pointwise second-moment center rate: {rate:.4f} "
         f"(bound {1.3 * 0.125:.4f})")
    assert rate <= 1.3 * 0.125
