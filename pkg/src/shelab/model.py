"""Domain types: nonlinearity specs, initial data, grids, and run configuration.

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfigError",
    "SigmaSpec",
    "InitialData",
    "SimConfig",
    "Field",
    "Sigma",
    "make_sigma",
    "make_initial_data",
    "load_config",
    "save_config",
    "apply_overrides",
]

# Envelope check |sigma(u)|/|u| in [low, lip] is sampled on +-10^j, j=-6..6.
SIGMA_VALIDATION_GRID = tuple(
    s * 10.0**j for j in range(-6, 7) for s in (-1.0, 1.0)
)
SIGMA_ENVELOPE_RTOL = 1e-12

BOUNDARY = "dirichlet0"


class ConfigError(ValueError):
    """Invalid configuration or spec (rejected before any computation)."""


@dataclass(frozen=True)
class SigmaSpec:
    """Multiplicative nonlinearity with declared linear envelope bounds.

    kind="linear":    sigma(u) = lambda*u, lip = low = lambda.
    kind="modulated": sigma(u) = u*(c1 + c2*sin(u)), c1 > c2 >= 0; the
    envelope constants are exactly c1 +- c2.
    """

    kind: str
    lam: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    lip: float = 0.0
    low: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "modulated"):
            raise ConfigError(f"unknown sigma kind {self.kind!r}")
        if self.kind == "linear":
            # lambda = 0 (noise off) is allowed for deterministic-limit runs.
            if self.lam < 0:
                raise ConfigError("linear sigma requires lambda >= 0")
            if self.lip != self.lam or self.low != self.lam:
                raise ConfigError("linear sigma requires lip = low = lambda")
        else:
            if not (self.c1 > self.c2 >= 0):
                raise ConfigError("modulated sigma requires c1 > c2 >= 0")
            if self.low <= 0:
                raise ConfigError("modulated sigma requires low > 0")
        if not (0 <= self.low <= self.lip):
            raise ConfigError("need 0 <= low <= lip")

    @staticmethod
    def linear(lam: float) -> SigmaSpec:
        return SigmaSpec(kind="linear", lam=lam, lip=lam, low=lam)

    @staticmethod
    def modulated(c1: float, c2: float) -> SigmaSpec:
        # |sigma(u)|/|u| = |c1 + c2 sin u| lies in [c1-c2, c1+c2] exactly.
        return SigmaSpec(kind="modulated", c1=c1, c2=c2, lip=c1 + c2, low=c1 - c2)


class Sigma:
    """Callable nonlinearity with accessors for the declared envelope bounds.

    Construct through make_sigma(), which runs the validation sweep.
    """

    def __init__(self, spec: SigmaSpec):
        self.spec = spec

    def __call__(self, u):
        if self.spec.kind == "linear":
            return self.spec.lam * np.asarray(u)
        u = np.asarray(u)
        return u * (self.spec.c1 + self.spec.c2 * np.sin(u))

    def lip(self) -> float:
        return self.spec.lip

    def low(self) -> float:
        return self.spec.low


def make_sigma(spec: SigmaSpec) -> Sigma:
    """Build the nonlinearity and validate the declared envelope by sampling.

    Rejects the spec if any sampled u has |sigma(u)| outside
    [low*|u|, lip*|u|] by more than 1e-12 relative; sigma(0) = 0 must hold
    exactly.
    """
    sig = Sigma(spec)
    if sig(0.0) != 0.0:
        raise ConfigError("sigma(0) != 0")
    u = np.array(SIGMA_VALIDATION_GRID)
    ratio = np.abs(sig(u)) / np.abs(u)
    tol = SIGMA_ENVELOPE_RTOL
    if np.any(ratio < spec.low * (1 - tol)) or np.any(ratio > spec.lip * (1 + tol)):
        bad = u[(ratio < spec.low * (1 - tol)) | (ratio > spec.lip * (1 + tol))]
        raise ConfigError(
            f"sigma envelope violated at u={bad[0]!r}: "
            f"|sigma(u)|/|u| outside [{spec.low}, {spec.lip}]"
        )
    return sig


def max_difference_quotient(sig: Sigma, n_pairs: int = 100_000, span: float = 100.0,
                            seed: int = 20090119) -> float:
    """Largest sampled |sigma(x)-sigma(y)|/|x-y| over random pairs in [-span, span].

    Diagnostic only: for the modulated family the difference quotient is
    unbounded in u (|d sigma/du| ~ c2*|u| along cos u = +-1), so the declared
    lip is an envelope constant, not a Lipschitz constant.  The moment-rate
    formulas implemented here use only the envelope.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-span, span, n_pairs)
    y = rng.uniform(-span, span, n_pairs)
    keep = np.abs(x - y) > 1e-12
    x, y = x[keep], y[keep]
    return float(np.max(np.abs(sig(x) - sig(y)) / np.abs(x - y)))


@dataclass(frozen=True)
class InitialData:
    """Nonnegative initial profile supported in [-K, K].

    triangle:      height*(1 - |x|/K) on [-K, K].
    smooth_bump:   height*exp(1 - 1/(1 - (x/K)^2)) on (-K, K); C-infinity.
    discrete_delta: mass `height` on the single cell centered at x=0,
                   i.e. value height/dx there (kernel-convergence tests only,
                   not valid for moment experiments since it is not in L^2
                   in the continuum limit).
    """

    kind: str
    K: float
    height: float

    def __post_init__(self):
        if self.kind not in ("triangle", "smooth_bump", "discrete_delta"):
            raise ConfigError(f"unknown initial-data kind {self.kind!r}")
        if self.K <= 0:
            raise ConfigError("K must be positive")
        if self.height <= 0:
            raise ConfigError("height must be positive")

    def profile(self, x):
        """Pointwise u0(x); zero outside [-K, K]."""
        x = np.asarray(x, dtype=float)
        if self.kind == "triangle":
            return self.height * np.maximum(0.0, 1.0 - np.abs(x) / self.K)
        if self.kind == "smooth_bump":
            r2 = (x / self.K) ** 2
            out = np.zeros_like(x)
            inside = r2 < 1.0
            out[inside] = self.height * np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
            return out
        raise ConfigError("discrete_delta has no pointwise profile")


@dataclass(frozen=True)
class Field:
    """Spatial profile at one time on the symmetric cell-centered grid.

    Cell i is centered at x_i = (i + 1/2)*dx - x_max with x_max = nx*dx/2,
    so the coordinates are recoverable from (len(values), dx) alone.
    """

    t: float
    values: np.ndarray
    dx: float

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 1:
            raise ConfigError("Field values must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("Field values must be finite")

    @property
    def nx(self) -> int:
        return len(self.values)

    @property
    def x_max(self) -> float:
        return 0.5 * self.nx * self.dx

    @property
    def xs(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx - self.x_max

    def l2_sq(self) -> float:
        """Grid L^2 norm squared, dx * sum(u^2)."""
        return float(self.dx * np.sum(self.values**2))

    def mass(self) -> float:
        return float(self.dx * np.sum(self.values))


@dataclass(frozen=True)
class SimConfig:
    """Full description of one discretized run (grid, horizon, inputs, seed)."""

    kappa: float
    sigma: SigmaSpec
    init: InitialData
    x_max: float
    nx: int
    dt: float
    t_end: float
    snapshot_times: tuple = ()
    boundary: str = BOUNDARY
    seed: int = 0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.x_max <= 0 or self.nx <= 0:
            raise ConfigError("x_max and nx must be positive")
        if self.dt <= 0 or self.t_end <= 0:
            raise ConfigError("dt and t_end must be positive")
        if self.boundary != BOUNDARY:
            raise ConfigError(f"boundary is fixed to {BOUNDARY!r}")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.init.K >= self.x_max:
            raise ConfigError("initial support K must satisfy K < x_max")
        object.__setattr__(self, "snapshot_times", tuple(float(t) for t in self.snapshot_times))
        prev = -math.inf
        for t in self.snapshot_times:
            if not (0.0 <= t <= self.t_end * (1 + 1e-12)):
                raise ConfigError(f"snapshot time {t} outside [0, t_end]")
            if t <= prev:
                raise ConfigError("snapshot_times must be strictly increasing")
            k = round(t / self.dt)
            if abs(k * self.dt - t) > 1e-9 * max(1.0, self.dt):
                raise ConfigError(f"snapshot time {t} is not a multiple of dt={self.dt}")
            prev = t

    @property
    def dx(self) -> float:
        return 2.0 * self.x_max / self.nx

    @property
    def stability_limit(self) -> float:
        return self.dx**2 / (2.0 * self.kappa)

    def check_stability(self) -> None:
        """Enforce dt <= dx^2/(2 kappa); required whenever the explicit scheme runs."""
        if self.dt > self.stability_limit * (1 + 1e-12):
            raise ConfigError(
                f"dt={self.dt} violates stability dt <= dx^2/(2 kappa) = "
                f"{self.stability_limit:.6g}"
            )

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def snapshot_steps(self) -> list:
        return [int(round(t / self.dt)) for t in self.snapshot_times]

    def grid_xs(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx - self.x_max


def make_initial_data(init: InitialData, cfg: SimConfig) -> Field:
    """Sample the initial profile onto the configured grid as a t=0 Field."""
    if init.K >= cfg.x_max:
        raise ConfigError("initial support K must satisfy K < x_max")
    xs = cfg.grid_xs()
    if init.kind == "discrete_delta":
        # The delta needs one cell centered at x=0 (within rounding), which
        # on this grid exists only for odd nx.
        i0 = int(np.argmin(np.abs(xs)))
        if abs(xs[i0]) > 1e-9 * cfg.dx:
            raise ConfigError(
                "discrete_delta requires a grid cell centered at x=0 "
                "(odd nx on the symmetric grid)"
            )
        values = np.zeros(cfg.nx)
        values[i0] = init.height / cfg.dx
    else:
        values = init.profile(xs)
    if np.any(values < 0):
        raise ConfigError("initial data must be nonnegative")
    return Field(t=0.0, values=values, dx=cfg.dx)


# --- configuration files -------------------------------------------------
#
# A config file is a JSON object whose keys are exactly the SimConfig field
# names; `sigma` and `init` are nested objects keyed by their own field
# names (the linear coefficient is spelled "lambda").  A `dx` key is
# accepted only as a consistency echo.  Unknown keys are an error.

_SIGMA_KEYS = {"kind", "lambda", "c1", "c2", "lip", "low"}
_INIT_KEYS = {"kind", "K", "height"}
_CONFIG_KEYS = {
    "kappa", "sigma", "init", "x_max", "nx", "dx", "dt", "t_end",
    "snapshot_times", "boundary", "seed",
}


def _sigma_from_dict(d: dict) -> SigmaSpec:
    unknown = set(d) - _SIGMA_KEYS
    if unknown:
        raise ConfigError(f"unknown sigma keys: {sorted(unknown)}")
    kind = d.get("kind")
    if kind == "linear":
        lam = float(d.get("lambda", 0.0))
        spec = SigmaSpec(kind="linear", lam=lam,
                         lip=float(d.get("lip", lam)), low=float(d.get("low", lam)))
    elif kind == "modulated":
        c1, c2 = float(d.get("c1", 0.0)), float(d.get("c2", 0.0))
        spec = SigmaSpec(kind="modulated", c1=c1, c2=c2,
                         lip=float(d.get("lip", c1 + c2)),
                         low=float(d.get("low", c1 - c2)))
    else:
        raise ConfigError(f"unknown sigma kind {kind!r}")
    return spec


def _sigma_to_dict(s: SigmaSpec) -> dict:
    if s.kind == "linear":
        return {"kind": "linear", "lambda": s.lam, "lip": s.lip, "low": s.low}
    return {"kind": "modulated", "c1": s.c1, "c2": s.c2, "lip": s.lip, "low": s.low}


def config_from_dict(d: dict) -> SimConfig:
    unknown = set(d) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("kappa", "sigma", "init", "x_max", "nx", "dt", "t_end"):
        if key not in d:
            raise ConfigError(f"missing config key {key!r}")
    if not isinstance(d["sigma"], dict) or not isinstance(d["init"], dict):
        raise ConfigError("sigma and init must be objects")
    unknown = set(d["init"]) - _INIT_KEYS
    if unknown:
        raise ConfigError(f"unknown init keys: {sorted(unknown)}")
    cfg = SimConfig(
        kappa=float(d["kappa"]),
        sigma=_sigma_from_dict(d["sigma"]),
        init=InitialData(kind=d["init"].get("kind"),
                         K=float(d["init"].get("K", 0.0)),
                         height=float(d["init"].get("height", 0.0))),
        x_max=float(d["x_max"]),
        nx=int(d["nx"]),
        dt=float(d["dt"]),
        t_end=float(d["t_end"]),
        snapshot_times=tuple(d.get("snapshot_times", ())),
        boundary=d.get("boundary", BOUNDARY),
        seed=int(d.get("seed", 0)),
    )
    if "dx" in d and abs(float(d["dx"]) - cfg.dx) > 1e-12 * cfg.dx:
        raise ConfigError(f"dx={d['dx']} inconsistent with 2*x_max/nx={cfg.dx}")
    return cfg


def config_to_dict(cfg: SimConfig) -> dict:
    return {
        "kappa": cfg.kappa,
        "sigma": _sigma_to_dict(cfg.sigma),
        "init": {"kind": cfg.init.kind, "K": cfg.init.K, "height": cfg.init.height},
        "x_max": cfg.x_max,
        "nx": cfg.nx,
        "dx": cfg.dx,
        "dt": cfg.dt,
        "t_end": cfg.t_end,
        "snapshot_times": list(cfg.snapshot_times),
        "boundary": cfg.boundary,
        "seed": cfg.seed,
    }


def load_config(path) -> SimConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
    return config_from_dict(d)


def save_config(cfg: SimConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_overrides(cfg: SimConfig, overrides: dict) -> SimConfig:
    """Apply dotted-path overrides (e.g. {"sigma.lambda": "2"}) to a config.

    Paths use the literal config-file key names; values are parsed as JSON
    scalars/lists, falling back to strings.
    """
    d = config_to_dict(cfg)
    d.pop("dx")
    # Drop derivable envelope bounds unless the caller pins them, so that
    # overriding e.g. sigma.lambda re-derives lip = low = lambda.
    s = cfg.sigma
    derived = (s.kind == "linear") or (s.lip == s.c1 + s.c2 and s.low == s.c1 - s.c2)
    if derived:
        for key in ("lip", "low"):
            if f"sigma.{key}" not in overrides:
                d["sigma"].pop(key, None)
    for path, raw in overrides.items():
        parts = path.split(".")
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown override path {path!r}")
            node = node[p]
        leaf = parts[-1]
        known = set(node) | (_CONFIG_KEYS if node is d else _SIGMA_KEYS | _INIT_KEYS)
        if leaf not in known:
            raise ConfigError(f"unknown override key {path!r}")
        try:
            node[leaf] = json.loads(raw) if isinstance(raw, str) else raw
        except json.JSONDecodeError:
            node[leaf] = raw
    return config_from_dict(d)
