"""Numerical laboratory for exchange-driven growth equations."""

__version__ = "0.1.0"

from .rates import KernelSpec, RateSequence, eval_rate, kernel_from_dict, validate_hypotheses
from .state import ClusterState, Norm, distance, moment, tail
from .dynamics import IntegratorConfig, Trajectory, integrate, rhs
from .equilibrium import (critical_density, equilibrium_by_relaxation, equilibrium_profile,
                          partition_sums, q_factors, radius_of_convergence, solve_fugacity, big_f)
from .diagnostics import (dissipation_d, entropy_g, fit_exponential_rate, flux, modified_entropy,
                          pair_tail_distance, relative_entropy_v)

__all__ = [
    "KernelSpec", "RateSequence", "eval_rate", "kernel_from_dict", "validate_hypotheses",
    "ClusterState", "Norm", "distance", "moment", "tail",
    "IntegratorConfig", "Trajectory", "integrate", "rhs",
    "critical_density", "equilibrium_by_relaxation", "equilibrium_profile", "partition_sums",
    "q_factors", "radius_of_convergence", "solve_fugacity", "big_f",
    "dissipation_d", "entropy_g", "fit_exponential_rate", "flux", "modified_entropy",
    "pair_tail_distance", "relative_entropy_v",
]
