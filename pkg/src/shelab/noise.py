"""Reproducible discretized space-time white noise.

Every Gaussian increment is a pure function of the counter tuple
(seed, replicate_index, step_counter, cell_index), so replicates can be
batched or scheduled in any order (and across any thread count) without
changing a single bit of output.

Generator construction:
  * Philox4x32-10 (Salmon, Moraes, Dror, Shaw, "Parallel random numbers:
    as easy as 1, 2, 3", SC'11) maps a 128-bit counter and 64-bit key to
    four 32-bit words.  Counter layout: (cell_block, step, replicate_lo,
    replicate_hi); key: (seed_lo, seed_hi).  Each counter block serves the
    four cells 4*cell_block .. 4*cell_block+3.
  * Each output word w becomes the open-interval uniform (w + 0.5) * 2^-32
    and is converted with Wichura's PPND16 rational approximation to the
    inverse normal CDF (algorithm AS 241, Applied Statistics 37, 1988).
    Inverse-CDF conversion consumes exactly one word per Gaussian, keeping
    counters aligned; no rejection.

Cell increments for a step of size dt on cells of width dx are scaled to
variance dt/dx, the white-noise cell average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, uint64, float64

__all__ = [
    "RNG_FAMILY",
    "RNG_VERSION",
    "NoiseStream",
    "standard_gaussians",
    "sample_increments",
]

RNG_FAMILY = "philox4x32-10+as241"
RNG_VERSION = "1"

# Philox4x32 multipliers and Weyl key increments from the reference paper.
_PHILOX_M0 = uint64(0xD2511F53)
_PHILOX_M1 = uint64(0xCD9E8D57)
_PHILOX_W0 = uint64(0x9E3779B9)
_PHILOX_W1 = uint64(0xBB67AE85)
_MASK32 = uint64(0xFFFFFFFF)

_MAX_STEPS = 2**32  # step counter is one 32-bit counter word


@njit(cache=True, nogil=True)
def _philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds; all arguments hold 32-bit values in uint64 slots."""
    for _ in range(10):
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        n0 = ((p1 >> uint64(32)) & _MASK32) ^ c1 ^ k0
        n1 = p1 & _MASK32
        n2 = ((p0 >> uint64(32)) & _MASK32) ^ c3 ^ k1
        n3 = p0 & _MASK32
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + _PHILOX_W0) & _MASK32
        k1 = (k1 + _PHILOX_W1) & _MASK32
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def _ppnd16(p):
    """Wichura AS 241 PPND16: inverse standard normal CDF, double precision."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    r = p if q < 0.0 else 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r = r - 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r = r - 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


_TWO_NEG32 = 2.0**-32


@njit(cache=True, nogil=True)
def _fill_gaussians(out, seed_lo, seed_hi, rep_lo, rep_hi, step):
    n = out.shape[0]
    nblk = (n + 3) // 4
    for blk in range(nblk):
        o0, o1, o2, o3 = _philox4x32(uint64(blk), step, rep_lo, rep_hi,
                                     seed_lo, seed_hi)
        base = 4 * blk
        if base < n:
            out[base] = _ppnd16((float64(o0) + 0.5) * _TWO_NEG32)
        if base + 1 < n:
            out[base + 1] = _ppnd16((float64(o1) + 0.5) * _TWO_NEG32)
        if base + 2 < n:
            out[base + 2] = _ppnd16((float64(o2) + 0.5) * _TWO_NEG32)
        if base + 3 < n:
            out[base + 3] = _ppnd16((float64(o3) + 0.5) * _TWO_NEG32)


def _split_u64(value: int):
    v = int(value)
    if not (0 <= v < 2**64):
        raise ValueError("value must fit in 64 bits unsigned")
    return uint64(v & 0xFFFFFFFF), uint64((v >> 32) & 0xFFFFFFFF)


def standard_gaussians(seed: int, replicate_index: int, step_counter: int, n: int) -> np.ndarray:
    """n standard normals for one (seed, replicate, step); pure and stateless."""
    if step_counter >= _MAX_STEPS or step_counter < 0:
        raise ValueError(f"step_counter must lie in [0, {_MAX_STEPS})")
    seed_lo, seed_hi = _split_u64(seed)
    rep_lo, rep_hi = _split_u64(replicate_index)
    out = np.empty(n, dtype=np.float64)
    _fill_gaussians(out, seed_lo, seed_hi, rep_lo, rep_hi, uint64(step_counter))
    return out


@dataclass
class NoiseStream:
    """Stateful view of one replicate's noise; value type, one owner per worker."""

    seed: int
    replicate_index: int = 0
    step_counter: int = 0

    def __post_init__(self):
        _split_u64(self.seed)
        _split_u64(self.replicate_index)


def sample_increments(stream: NoiseStream, nx: int, dt: float, dx: float) -> np.ndarray:
    """One step of cell-averaged white-noise increments, variance dt/dx per cell.

    Advances the stream's step counter.
    """
    if dt <= 0 or dx <= 0:
        raise ValueError("dt and dx must be positive")
    z = standard_gaussians(stream.seed, stream.replicate_index, stream.step_counter, nx)
    stream.step_counter += 1
    return z * np.sqrt(dt / dx)
