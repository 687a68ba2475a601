"""shelab: simulation and verification lab for the 1-D stochastic heat equation.

The equation under study is du = kappa u_xx dt + sigma(u) dW with space-time
white noise and compactly supported nonnegative initial data.  The package
pairs a Monte Carlo path solver with deterministic moment oracles so the
known moment growth rates, support geometry, regularity, and
peak-concentration effects can be measured and cross-checked at desk scale.
"""

__version__ = "0.1.0"

from .model import (
    ConfigError,
    Field,
    InitialData,
    SigmaSpec,
    SimConfig,
    load_config,
    make_initial_data,
    make_sigma,
    save_config,
)
from .kernel import (
    TruncationError,
    heat_convolve,
    heat_kernel,
    kernel_l2_norm_sq,
    laplace_kernel_l2,
    lyapunov_threshold,
    plancherel_laplace,
)
from .noise import RNG_FAMILY, RNG_VERSION, NoiseStream, sample_increments
from .solver import (
    PicardResult,
    SolverError,
    Trajectory,
    picard_iterate,
    simulate_path,
    step_explicit,
)
from .oracle import (
    LaplaceU,
    MomentField,
    PicardBound,
    laplace_U_numeric,
    lower_bound_certificate,
    picard_moment_bound,
    solve_second_moment_volterra,
)
from .estimators import (
    EstimatorError,
    HolderReport,
    MomentSeries,
    SupportProfile,
    effective_support_radius,
    fit_lyapunov,
    holder_increment_exponent,
    mc_moments,
    peak_concentration_ratio,
    rv_integral_check,
    spatial_decay_fit,
    support_profile,
    tail_mass_rate,
)
