"""Explicit Euler-Maruyama time stepping for the stochastic heat equation.

One replicate is one independent task; there is no shared mutable state
between replicates.  The batched driver advances many replicates through
identical arithmetic per row, so a replicate's trajectory is bit-identical
whether it runs alone or inside any batch (the per-cell noise is keyed by
replicate index, never by batch position).

Scheme (the single supported one):

    u'_i = u_i + kappa*dt*(u_{i-1} - 2 u_i + u_{i+1})/dx^2 + sigma(u_i)*xi_i

with Dirichlet-zero ghost cells and xi_i i.i.d. N(0, dt/dx).  Negative
values are never clipped by default; positivity is monitored and reported.
No adaptive stepping, no semi-implicit variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, uint64, float64

from .kernel import wraparound_mass, WRAP_MASS_TOL
from .model import ConfigError, Field, SimConfig, make_initial_data, make_sigma
from .noise import _philox4x32, _ppnd16, _split_u64, _MAX_STEPS, _TWO_NEG32

__all__ = [
    "SolverError",
    "PositivityReport",
    "Trajectory",
    "step_explicit",
    "simulate_path",
    "run_replicates",
    "picard_iterate",
    "PicardResult",
]

PICARD_MAX_NX = 512
PICARD_MAX_T_END = 2.0


class SolverError(RuntimeError):
    """A replicate produced non-finite values or hit a runtime limit."""


def _scheme_coefficients(cfg: SimConfig):
    # Shared by every execution path so results agree bitwise.
    a = cfg.kappa * cfg.dt / cfg.dx**2
    noise_scale = math.sqrt(cfg.dt / cfg.dx)
    return a, noise_scale


def _sigma_code(cfg: SimConfig):
    if cfg.sigma.kind == "linear":
        return 0, cfg.sigma.lam, 0.0
    return 1, cfg.sigma.c1, cfg.sigma.c2


@njit(cache=True, nogil=True)
def _step_batch(u, out, reps_lo, reps_hi, seed_lo, seed_hi, step, a,
                sig_kind, s1, s2, noise_scale, clip):
    """One fused step for a batch of replicates: noise, sigma, stencil."""
    B, nx = u.shape
    nblk = (nx + 3) // 4
    for b in range(B):
        row = u[b]
        orow = out[b]
        for blk in range(nblk):
            o0, o1, o2, o3 = _philox4x32(uint64(blk), step, reps_lo[b], reps_hi[b],
                                         seed_lo, seed_hi)
            base = 4 * blk
            for lane in range(4):
                i = base + lane
                if i >= nx:
                    break
                if lane == 0:
                    w = o0
                elif lane == 1:
                    w = o1
                elif lane == 2:
                    w = o2
                else:
                    w = o3
                z = _ppnd16((float64(w) + 0.5) * _TWO_NEG32)
                uc = row[i]
                ul = row[i - 1] if i > 0 else 0.0
                ur = row[i + 1] if i < nx - 1 else 0.0
                if sig_kind == 0:
                    sig = s1 * uc
                else:
                    sig = uc * (s1 + s2 * np.sin(uc))
                val = uc + a * ((ul - 2.0 * uc) + ur) + sig * (z * noise_scale)
                if clip and val < 0.0:
                    val = 0.0
                orow[i] = val


def step_explicit(u: Field, xi: np.ndarray, cfg: SimConfig) -> Field:
    """Advance one field by one step using the provided noise increments.

    xi must hold the variance-(dt/dx) increments for this step.  Raises
    SolverError if the output is not finite.
    """
    cfg.check_stability()
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (cfg.nx,):
        raise ConfigError(f"xi must have shape ({cfg.nx},)")
    if u.nx != cfg.nx:
        raise ConfigError("field does not match the configured grid")
    a, _ = _scheme_coefficients(cfg)
    sigma = make_sigma(cfg.sigma)
    v = u.values
    ul = np.empty_like(v)
    ur = np.empty_like(v)
    ul[0] = 0.0
    ul[1:] = v[:-1]
    ur[-1] = 0.0
    ur[:-1] = v[1:]
    with np.errstate(over="ignore", invalid="ignore"):
        lap = (ul - 2.0 * v) + ur
        out = v + a * lap + sigma(v) * xi
    if not np.all(np.isfinite(out)):
        raise SolverError("non-finite value after explicit step")
    return Field(t=u.t + cfg.dt, values=out, dx=u.dx)


@dataclass(frozen=True)
class PositivityReport:
    """Scheme-quality gauge: the solution should stay (nearly) nonnegative."""

    min_value: float
    neg_mass_fraction: tuple  # per snapshot: int(u^-)/int(|u|)


@dataclass(frozen=True)
class Trajectory:
    config: SimConfig
    replicate_index: int
    snapshots: tuple  # Field at each requested snapshot time
    positivity_report: PositivityReport


def _neg_fraction(values: np.ndarray) -> float:
    tot = np.sum(np.abs(values))
    if tot == 0.0:
        return 0.0
    return float(np.sum(np.abs(np.minimum(values, 0.0))) / tot)


def run_replicates(cfg: SimConfig, replicate_indices, collect, clip_negative: bool = False):
    """Drive a batch of replicates through all steps.

    `collect(snap_idx, t, U)` is called at every configured snapshot time
    with the (B, nx) state; row b belongs to replicate_indices[b].  Returns
    the final (B, nx) state.
    """
    cfg.check_stability()
    reps = np.asarray(replicate_indices, dtype=np.uint64)
    n_steps = cfg.n_steps
    if n_steps >= _MAX_STEPS:
        raise ConfigError("too many steps for the 32-bit step counter")
    a, noise_scale = _scheme_coefficients(cfg)
    sig_kind, s1, s2 = _sigma_code(cfg)
    seed_lo, seed_hi = _split_u64(cfg.seed)
    reps_lo = (reps & np.uint64(0xFFFFFFFF)).astype(np.uint64)
    reps_hi = (reps >> np.uint64(32)).astype(np.uint64)

    u0 = make_initial_data(cfg.init, cfg).values
    U = np.broadcast_to(u0, (len(reps), cfg.nx)).copy()
    buf = np.empty_like(U)

    snap_steps = cfg.snapshot_steps()
    snap_lookup = {s: i for i, s in enumerate(snap_steps)}
    if 0 in snap_lookup:
        collect(snap_lookup[0], 0.0, U)
    for step in range(n_steps):
        _step_batch(U, buf, reps_lo, reps_hi, seed_lo, seed_hi, uint64(step),
                    a, sig_kind, s1, s2, noise_scale, clip_negative)
        U, buf = buf, U
        if (step + 1) in snap_lookup:
            collect(snap_lookup[step + 1], (step + 1) * cfg.dt, U)
    return U


def simulate_path(cfg: SimConfig, replicate_index: int = 0,
                  clip_negative: bool = False) -> Trajectory:
    """One replicate's trajectory with snapshots and a positivity report.

    Deterministic given (cfg.seed, replicate_index).
    """
    snapshots = []
    neg_fracs = []
    min_seen = [math.inf]

    def collect(snap_idx, t, U):
        row = U[0]
        if not np.all(np.isfinite(row)):
            raise SolverError(
                f"replicate {replicate_index}: non-finite state at t={t:.6g}"
            )
        snapshots.append(Field(t=t, values=row.copy(), dx=cfg.dx))
        neg_fracs.append(_neg_fraction(row))
        min_seen[0] = min(min_seen[0], float(row.min()))

    run_replicates(cfg, [replicate_index], collect, clip_negative=clip_negative)
    report = PositivityReport(min_value=min_seen[0], neg_mass_fraction=tuple(neg_fracs))
    return Trajectory(config=cfg, replicate_index=replicate_index,
                      snapshots=tuple(snapshots), positivity_report=report)


# --- pathwise Picard iteration --------------------------------------------

@dataclass(frozen=True)
class PicardResult:
    iterates_at_t_end: tuple  # Field per iteration, u^(1) .. u^(n)
    euler: Field
    l2_diffs: tuple  # d_n = ||u^(n+1) - u^(n)||_L2 at t_end, n = 0 .. n_iters-2


def picard_iterate(cfg: SimConfig, replicate_index: int, n_iters: int) -> PicardResult:
    """Successive-substitution iterates of the discrete mild formulation.

    u^(0) is the initial profile held constant in time; u^(n+1) at step m is
    (p_{t_m} * u0) plus the left-endpoint time discretization of the
    stochastic convolution driven by sigma(u^(n)).  The same per-step noise
    increments as the Euler path are used, so the returned Euler solution is
    comparable on this single realization.  Cost is quadratic in the number
    of steps, hence the size caps.
    """
    if cfg.nx > PICARD_MAX_NX:
        raise ConfigError(f"picard_iterate caps nx at {PICARD_MAX_NX}")
    if cfg.t_end > PICARD_MAX_T_END:
        raise ConfigError(f"picard_iterate caps t_end at {PICARD_MAX_T_END}")
    if n_iters < 1:
        raise ConfigError("n_iters must be >= 1")
    margin = cfg.x_max - cfg.init.K
    if wraparound_mass(cfg.t_end, cfg.kappa, margin) > WRAP_MASS_TOL:
        raise ConfigError("domain too small for spectral convolutions up to t_end")

    nt = cfg.n_steps
    nx = cfg.nx
    _, noise_scale = _scheme_coefficients(cfg)
    sigma = make_sigma(cfg.sigma)
    u0 = make_initial_data(cfg.init, cfg).values

    from .noise import standard_gaussians

    xi = np.empty((nt, nx))
    for j in range(nt):
        xi[j] = standard_gaussians(cfg.seed, replicate_index, j, nx) * noise_scale

    # Heat multipliers exp(-kappa m dt xi^2) for m = 1..nt, plus base terms.
    freq = 2.0 * math.pi * np.fft.rfftfreq(nx, d=cfg.dx)
    decay = np.exp(-cfg.kappa * cfg.dt * freq**2)
    khat = np.empty((nt + 1, len(freq)))
    khat[0] = 1.0
    for m in range(1, nt + 1):
        khat[m] = khat[m - 1] * decay
    u0_hat = np.fft.rfft(u0)
    base = np.empty((nt + 1, nx))
    base[0] = u0
    for m in range(1, nt + 1):
        base[m] = np.fft.irfft(u0_hat * khat[m], n=nx)

    U_prev = np.broadcast_to(u0, (nt + 1, nx)).copy()  # u^(0)
    iterates = []
    diffs = []
    last_at_end = None
    for _ in range(n_iters):
        shat = np.fft.rfft(sigma(U_prev[:-1]) * xi, axis=1)
        U_next = base.copy()
        for m in range(1, nt + 1):
            acc = np.zeros(len(freq), dtype=complex)
            for j in range(m):
                acc += khat[m - j] * shat[j]
            U_next[m] += np.fft.irfft(acc, n=nx)
        field = Field(t=cfg.t_end, values=U_next[nt].copy(), dx=cfg.dx)
        iterates.append(field)
        if last_at_end is not None:
            diffs.append(float(np.sqrt(cfg.dx * np.sum((field.values - last_at_end) ** 2))))
        last_at_end = field.values
        U_prev = U_next

    euler_traj = simulate_path(
        SimConfig(kappa=cfg.kappa, sigma=cfg.sigma, init=cfg.init, x_max=cfg.x_max,
                  nx=cfg.nx, dt=cfg.dt, t_end=cfg.t_end,
                  snapshot_times=(cfg.t_end,), boundary=cfg.boundary, seed=cfg.seed),
        replicate_index,
    )
    return PicardResult(iterates_at_t_end=tuple(iterates),
                        euler=euler_traj.snapshots[-1],
                        l2_diffs=tuple(diffs))
