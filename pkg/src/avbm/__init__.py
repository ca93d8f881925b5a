"""Time-uniform, posterior-uniform Bernstein bounds for mixtures of martingales."""

from .bounds import (
    BoundParams,
    ConvergenceError,
    MixtureState,
    Posterior,
    RadiusReport,
    ValidationError,
    dv_inequality_check,
    evaluate_bound,
    kl_divergence,
    lambda0,
    lil_radius_explicit,
    lil_radius_implicit,
    lln_bound_holds,
    seldin_fixed_time_radius,
    tau0_reached,
    tau0_threshold,
    zeta,
)
from .harness import ExperimentSpec, PosteriorPolicy, run_coverage, run_lln_coverage
from .sim import FamilySpec, PathBundle, generate, mixture_state

__version__ = "0.1.0"
