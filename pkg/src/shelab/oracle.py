"""Deterministic second-moment dynamics: the artifact's Monte-Carlo-free ground truth.

For the linear nonlinearity sigma(u) = lam*u the pointwise second moment
f_t(x) = E|u_t(x)|^2 satisfies the closed Volterra renewal equation

    f_t = (p_t * u0)^2 + lam^2 * int_0^t (p_{t-s}^2 * f_s)(x) ds,

where p_tau^2 has total mass (8 pi kappa tau)^(-1/2) and Gaussian shape of
variance kappa*tau.  The time integral is discretized by product
integration: on each cell the integrable tau^(-1/2) mass singularity is
integrated exactly while the smooth Gaussian-smoothed factor is
interpolated linearly, which keeps the singular first cell exact and the
scheme implicit (and unconditionally positive) in f_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernel import laplace_kernel_l2, lyapunov_threshold, plancherel_laplace, \
    wraparound_mass, WRAP_MASS_TOL, TruncationError
from .model import ConfigError, InitialData, SimConfig, make_initial_data

__all__ = [
    "MomentField",
    "VolterraResult",
    "LaplaceU",
    "PicardBound",
    "DivergenceCertificate",
    "solve_second_moment_volterra",
    "picard_moment_bound",
    "lower_bound_certificate",
    "laplace_U_numeric",
    "default_oracle_x_max",
]

BOUNDARY_FRACTION_TOL = 1e-10


@dataclass(frozen=True)
class MomentField:
    """E|u_t(x)|^2 sampled on the grid (same layout as Field)."""

    t: float
    values: np.ndarray
    dx: float

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("MomentField values must be finite")
        if np.any(self.values < 0):
            raise ValueError("MomentField values must be nonnegative")

    @property
    def nx(self) -> int:
        return len(self.values)

    @property
    def x_max(self) -> float:
        return 0.5 * self.nx * self.dx

    @property
    def xs(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx - self.x_max

    def l2_mass(self) -> float:
        """dx * sum f = grid approximation of E||u_t||_{L^2}^2."""
        return float(self.dx * np.sum(self.values))


@dataclass(frozen=True)
class VolterraResult:
    fields: tuple  # MomentField at the requested times
    times_all: np.ndarray  # every time-step node, 0 .. t_end
    l2_mass_all: np.ndarray  # dx*sum(f) at every node
    boundary_fraction_max: float  # max over steps of edge value / spatial max


def default_oracle_x_max(kappa: float, lam: float, K: float, t_end: float) -> float:
    """Domain provisioning for oracle runs: diffusive spread plus support growth."""
    m_guess = math.sqrt(lam**4 / kappa)
    return K + 6.0 * math.sqrt(4.0 * kappa * t_end) + 2.0 * m_guess * t_end


def solve_second_moment_volterra(cfg: SimConfig, times=None) -> VolterraResult:
    """March the closed second-moment equation on cfg's grid (PAM only).

    `times` selects which nodes to return as MomentFields (default: all,
    including t=0); each must be a multiple of cfg.dt.  Raises ConfigError
    for non-linear sigma (the identity does not close) and TruncationError
    when the domain cannot hold the solution to t_end.
    """
    if cfg.sigma.kind != "linear":
        raise ConfigError("the second-moment identity is closed only for linear sigma")
    if cfg.init.kind == "discrete_delta":
        raise ConfigError("discrete_delta is not admissible for moment runs (not L^2)")
    lam = cfg.sigma.lam
    kappa = cfg.kappa
    dt = cfg.dt
    nt = cfg.n_steps
    nx = cfg.nx

    margin = cfg.x_max - cfg.init.K
    if wraparound_mass(cfg.t_end, kappa, margin) > WRAP_MASS_TOL:
        raise TruncationError("x_max too small for spectral convolutions up to t_end")

    if times is None:
        want = set(range(nt + 1))
    else:
        want = set()
        for t in times:
            k = round(float(t) / dt)
            if abs(k * dt - float(t)) > 1e-9 * max(1.0, dt) or not (0 <= k <= nt):
                raise ConfigError(f"requested time {t} is not a grid node")
            want.add(k)

    u0 = make_initial_data(cfg.init, cfg).values
    freq = 2.0 * math.pi * np.fft.rfftfreq(nx, d=cfg.dx)
    nfreq = len(freq)

    # Heat multipliers for (p_t * u0): exp(-kappa t xi^2) built incrementally.
    decay_full = np.exp(-kappa * dt * freq**2)
    # Squared-kernel Gaussian factor exp(-kappa tau xi^2 / 2) per whole step.
    decay_half = np.exp(-0.5 * kappa * dt * freq**2)

    u0_hat = np.fft.rfft(u0)

    # Product-integration moments of the mass density m(tau) = (8 pi kappa tau)^(-1/2)
    # over cells [j dt, (j+1) dt], with theta the in-cell linear coordinate:
    #   mu0_j = int m dtau,   mu1_j = int m * theta dtau.
    c = (8.0 * math.pi * kappa) ** -0.5
    j = np.arange(nt, dtype=float)
    sq_lo = np.sqrt(j * dt)
    sq_hi = np.sqrt((j + 1.0) * dt)
    mu0 = 2.0 * c * (sq_hi - sq_lo)
    mu1 = c * ((2.0 / 3.0) * ((j + 1.0) * dt * sq_hi - j * dt * sq_lo) / dt
               - 2.0 * j * dt * (sq_hi - sq_lo) / dt)
    # Node weights on B_j = exp(-kappa*(j dt)*xi^2/2) * fhat_{n-j}:
    #   node 0 (implicit, B_0 = fhat_n): w0 = mu0_0 - mu1_0
    #   node 1..n-1: w_j = mu1_{j-1} + mu0_j - mu1_j
    #   node n:      w_n = mu1_{n-1}
    w0 = mu0[0] - mu1[0]
    denom = 1.0 - lam**2 * w0
    if denom <= 0.0:
        raise ConfigError("dt too large for the implicit singular cell (lam^2*w0 >= 1)")

    f = u0**2
    fhat_hist = np.empty((nt + 1, nfreq), dtype=complex)
    fhat_hist[0] = np.fft.rfft(f)
    khat_hist = np.empty((nt + 1, nfreq))
    khat_hist[0] = 1.0

    fields = {}
    if 0 in want:
        fields[0] = MomentField(t=0.0, values=f.copy(), dx=cfg.dx)
    masses = np.empty(nt + 1)
    masses[0] = cfg.dx * float(np.sum(f))
    edge_frac = 0.0

    heat_hat = u0_hat.copy()
    for n in range(1, nt + 1):
        heat_hat = heat_hat * decay_full
        g = np.fft.irfft(heat_hat, n=nx) ** 2
        khat_hist[n] = khat_hist[n - 1] * decay_half

        acc = mu1[n - 1] * (khat_hist[n] * fhat_hist[0])
        if n >= 2:
            wj = mu1[0:n - 1] + mu0[1:n] - mu1[1:n]
            acc = acc + wj @ (khat_hist[1:n] * fhat_hist[n - 1:0:-1])
        conv = np.fft.irfft(acc, n=nx)

        f = (g + lam**2 * conv) / denom
        # FFT roundoff can leave ~1e-17-relative negatives in the far tail;
        # the true solution is nonnegative.
        np.maximum(f, 0.0, out=f)
        fhat_hist[n] = np.fft.rfft(f)

        masses[n] = cfg.dx * float(np.sum(f))
        peak = f.max()
        if peak > 0:
            edge_frac = max(edge_frac, max(f[0], f[-1]) / peak)
        if n in want:
            fields[n] = MomentField(t=n * dt, values=f.copy(), dx=cfg.dx)

    if edge_frac > BOUNDARY_FRACTION_TOL:
        raise TruncationError(
            f"boundary second-moment fraction {edge_frac:.3e} exceeds "
            f"{BOUNDARY_FRACTION_TOL:g}; enlarge x_max"
        )
    times_all = np.arange(nt + 1) * dt
    return VolterraResult(
        fields=tuple(fields[k] for k in sorted(fields)),
        times_all=times_all,
        l2_mass_all=masses,
        boundary_fraction_max=edge_frac,
    )


@dataclass(frozen=True)
class PicardBound:
    """Iterates of M^(n+1) = u0_l2_sq + q M^(n), q = lip^2/(2 sqrt(2 kappa lam))."""

    lam: float
    q: float
    iterates: tuple
    fixed_point: float | None  # None when q >= 1
    divergent: bool


def picard_moment_bound(lam: float, lip: float, kappa: float,
                        u0_l2_sq: float, n: int) -> PicardBound:
    """Affine Laplace-domain recursion bounding the moment iterates."""
    if lam <= 0:
        raise ValueError("picard_moment_bound requires lambda > 0")
    if lip < 0 or kappa <= 0 or u0_l2_sq < 0:
        raise ValueError("lip, u0_l2_sq must be >= 0 and kappa > 0")
    q = lip**2 * laplace_kernel_l2(lam, kappa) if lip > 0 else 0.0
    ms = [u0_l2_sq]
    for _ in range(n):
        ms.append(u0_l2_sq + q * ms[-1])
    divergent = q >= 1.0
    fp = None if divergent else u0_l2_sq / (1.0 - q)
    return PicardBound(lam=lam, q=q, iterates=tuple(ms), fixed_point=fp,
                       divergent=divergent)


@dataclass(frozen=True)
class DivergenceCertificate:
    """Laplace-domain lower-bound bookkeeping: U(lam) >= fourier_term + q_low*U(lam)."""

    lam: float
    fourier_term: float
    q_low: float
    certifies_divergence: bool  # q_low >= 1 with a positive source forces U = inf


def lower_bound_certificate(lam: float, low: float, kappa: float,
                            u0: InitialData) -> DivergenceCertificate:
    if lam <= 0:
        raise ValueError("lower_bound_certificate requires lambda > 0")
    fourier_term = plancherel_laplace(u0, lam, kappa)
    q_low = low**2 * laplace_kernel_l2(lam, kappa)
    return DivergenceCertificate(
        lam=lam,
        fourier_term=fourier_term,
        q_low=q_low,
        certifies_divergence=bool(q_low >= 1.0 and fourier_term > 0.0),
    )


@dataclass(frozen=True)
class LaplaceU:
    lam: float
    value: float
    tail_fraction: float
    tail_warning: bool


def laplace_U_numeric(moment_fields, lam: float) -> LaplaceU:
    """Trapezoidal Laplace quadrature of t -> dx*sum(f_t) over the given fields.

    The fields must sit on a uniform time grid.  When the last integrand
    value exceeds 1e-6 of the accumulated integral the transform has not
    converged in t_end and a tail warning is attached (the divergence
    signature for lam at or below the growth rate).
    """
    fields = list(moment_fields)
    if not fields:
        raise ValueError("laplace_U_numeric requires at least one moment field")
    times = np.array([f.t for f in fields])
    if len(times) >= 3:
        steps = np.diff(times)
        if np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, steps[0]):
            raise ValueError("moment fields must sit on a uniform time grid")
    masses = np.array([f.l2_mass() for f in fields])
    integrand = np.exp(-lam * times) * masses
    value = float(np.trapezoid(integrand, times)) if len(times) > 1 else 0.0
    tail = float(integrand[-1])
    tail_fraction = tail / value if value > 0 else math.inf
    return LaplaceU(lam=lam, value=value, tail_fraction=tail_fraction,
                    tail_warning=bool(tail_fraction > 1e-6))


def threshold_bracket(low: float, lip: float, kappa: float) -> tuple:
    """(L_sigma^4/(8 kappa), Lip_sigma^4/(8 kappa)) for an envelope pair."""
    lo = lyapunov_threshold(low, kappa)
    hi = lyapunov_threshold(lip, kappa)
    if lo > hi:
        raise ValueError("threshold bracket requires low <= lip")
    return lo, hi
