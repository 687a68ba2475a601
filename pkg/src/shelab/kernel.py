"""Heat-kernel evaluation, Gaussian convolution, and Laplace-domain identities.

The kernel is p_t(z) = (4 pi kappa t)^(-1/2) exp(-z^2/(4 kappa t)), the
fundamental solution of d/dt = kappa d^2/dx^2.  Everything here is a pure
function; the one cached quantity (the smooth-bump transform) is computed
under a one-time-initialization contract.
"""

from __future__ import annotations

import functools
import math

import numpy as np
from scipy import integrate
from scipy.special import erfc

from .model import Field, InitialData

__all__ = [
    "TruncationError",
    "heat_kernel",
    "kernel_l2_norm_sq",
    "laplace_kernel_l2",
    "lyapunov_threshold",
    "heat_convolve",
    "wraparound_mass",
    "initial_fourier_transform",
    "plancherel_laplace",
]

# One-sided kernel mass allowed to wrap around the periodic truncation.
WRAP_MASS_TOL = 1e-8


class TruncationError(RuntimeError):
    """The truncated domain cannot represent the requested operation."""


def heat_kernel(t: float, z, kappa: float):
    """p_t(z) for t > 0; vectorized over z."""
    if t <= 0:
        raise ValueError("heat_kernel requires t > 0")
    if kappa <= 0:
        raise ValueError("heat_kernel requires kappa > 0")
    z = np.asarray(z, dtype=float)
    out = np.exp(-(z**2) / (4.0 * kappa * t)) / math.sqrt(4.0 * math.pi * kappa * t)
    return out if out.ndim else float(out)


def kernel_l2_norm_sq(t: float, kappa: float) -> float:
    """Integral of p_t(z)^2 dz = (8 pi kappa t)^(-1/2)."""
    if t <= 0:
        raise ValueError("kernel_l2_norm_sq requires t > 0")
    if kappa <= 0:
        raise ValueError("kernel_l2_norm_sq requires kappa > 0")
    return (8.0 * math.pi * kappa * t) ** -0.5


def laplace_kernel_l2(lam: float, kappa: float) -> float:
    """Laplace transform of t -> ||p_t||_{L^2}^2, equal to 1/(2 sqrt(2 kappa lam))."""
    if lam <= 0:
        raise ValueError("laplace_kernel_l2 requires lambda > 0")
    if kappa <= 0:
        raise ValueError("laplace_kernel_l2 requires kappa > 0")
    return 1.0 / (2.0 * math.sqrt(2.0 * kappa * lam))


def lyapunov_threshold(coeff: float, kappa: float) -> float:
    """Moment growth-rate scale coeff^4/(8 kappa) for an envelope coefficient."""
    if coeff <= 0 or kappa <= 0:
        raise ValueError("lyapunov_threshold requires coeff > 0 and kappa > 0")
    return coeff**4 / (8.0 * kappa)


def support_radius(f: Field, rel_floor: float = 1e-14) -> float:
    """Largest |x| whose cell value exceeds rel_floor * max|f| (0 for f == 0)."""
    mag = np.abs(f.values)
    peak = mag.max()
    if peak == 0.0:
        return 0.0
    nz = np.abs(f.xs)[mag > rel_floor * peak]
    return float(nz.max()) if len(nz) else 0.0


def wraparound_mass(t: float, kappa: float, margin: float) -> float:
    """One-sided kernel mass beyond distance `margin` at diffusion scale sqrt(4 kappa t)."""
    if margin <= 0:
        return 0.5
    return 0.5 * erfc(margin / math.sqrt(4.0 * kappa * t))


def heat_convolve(f: Field, t: float, kappa: float, guard: bool = True) -> Field:
    """Convolve a grid field with p_t, spectrally on the periodic extension.

    The analytic transform exp(-kappa t xi^2) is applied to the rFFT of the
    samples, which realizes circular convolution with the periodized exact
    kernel in O(nx log nx).  With `guard`, raises TruncationError when the
    kernel mass that would wrap past the domain edge (measured from the
    field's detected support) exceeds 1e-8.
    """
    if t <= 0:
        raise ValueError("heat_convolve requires t > 0")
    if kappa <= 0:
        raise ValueError("heat_convolve requires kappa > 0")
    if guard:
        margin = f.x_max - support_radius(f)
        mass = wraparound_mass(t, kappa, margin)
        if mass > WRAP_MASS_TOL:
            raise TruncationError(
                f"wrap-around kernel mass {mass:.3e} beyond x_max at scale "
                f"sqrt(4*kappa*t)={math.sqrt(4 * kappa * t):.3g} exceeds {WRAP_MASS_TOL:g}"
            )
    xi = 2.0 * math.pi * np.fft.rfftfreq(f.nx, d=f.dx)
    fhat = np.fft.rfft(f.values)
    out = np.fft.irfft(fhat * np.exp(-kappa * t * xi**2), n=f.nx)
    return Field(t=f.t + t, values=out, dx=f.dx)


# --- Fourier transforms of the initial profiles ---------------------------

def _triangle_ft(xi, K: float, height: float):
    """FT of the triangle profile: height*K*sinc^2(xi*K/2)."""
    y = np.asarray(xi, dtype=float) * (K / 2.0)
    return height * K * np.sinc(y / math.pi) ** 2


@functools.lru_cache(maxsize=8)
def _bump_ft_table(K: float, height: float):
    """High-resolution samples of the smooth-bump transform, computed once.

    The bump is even, so u0hat(xi) = 2 * int_0^K cos(xi x) u0(x) dx, done by
    Gauss-Legendre with enough nodes to resolve the fastest oscillation kept
    in the table.
    """
    xi_max = 200.0 / K
    xi_grid = np.linspace(0.0, xi_max, 4001)
    nodes, weights = np.polynomial.legendre.leggauss(2000)
    x = 0.5 * K * (nodes + 1.0)
    w = 0.5 * K * weights
    r2 = (x / K) ** 2
    u0 = height * np.exp(1.0 - 1.0 / (1.0 - r2))
    vals = 2.0 * np.cos(np.outer(xi_grid, x)) @ (w * u0)
    return xi_grid, vals


def _bump_ft(xi, K: float, height: float):
    xi_grid, vals = _bump_ft_table(K, height)
    xi = np.abs(np.asarray(xi, dtype=float))
    out = np.interp(xi, xi_grid, vals, right=0.0)
    return out


def initial_fourier_transform(init: InitialData, xi):
    """u0hat(xi) = int u0(x) exp(-i xi x) dx (real, since u0 is even)."""
    if init.kind == "triangle":
        return _triangle_ft(xi, init.K, init.height)
    if init.kind == "smooth_bump":
        return _bump_ft(xi, init.K, init.height)
    raise ValueError(f"no closed transform for initial kind {init.kind!r}")


def plancherel_laplace(u0: InitialData, lam: float, kappa: float) -> float:
    """Laplace transform of t -> ||p_t * u0||_{L^2}^2 via Plancherel.

    Equals (2 pi)^(-1) * int_{-inf}^{inf} |u0hat(xi)|^2 / (lam + 2 kappa xi^2) dxi,
    evaluated as (1/pi) * int_0^inf by evenness.  For u0 = delta_0 this
    reduces to laplace_kernel_l2.
    """
    if lam <= 0:
        raise ValueError("plancherel_laplace requires lambda > 0")
    if kappa <= 0:
        raise ValueError("plancherel_laplace requires kappa > 0")

    def integrand(xi):
        ft = initial_fourier_transform(u0, xi)
        return ft * ft / (lam + 2.0 * kappa * xi**2)

    # The integrand peaks at xi=0 with Lorentzian width sqrt(lam/(2 kappa))
    # and the transform varies on scale 1/K; quadrature segments resolve both.
    width = math.sqrt(lam / (2.0 * kappa))
    cuts = sorted({10.0 * width, 40.0 / u0.K, 10.0 * width + 40.0 / u0.K})
    total = 0.0
    lo = 0.0
    for hi in cuts:
        if hi > lo:
            part, _ = integrate.quad(integrand, lo, hi, epsabs=1e-12,
                                     epsrel=1e-10, limit=400)
            total += part
            lo = hi
    tail, _ = integrate.quad(integrand, lo, np.inf, epsabs=1e-12, epsrel=1e-10,
                             limit=400)
    return (total + tail) / math.pi
