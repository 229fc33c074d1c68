"""Effective diffusivity of periodic SDEs by Monte Carlo, with a grid reference."""

from .coeffs import (
    BENCHMARKS,
    CoefficientError,
    ProblemDefinition,
    evaluate_coefficients,
    get_problem,
    is_commutative,
    milstein_xi,
    modified_coefficients,
)
from .eulerian import (
    EulerianSolution,
    TorusGridField,
    effective_diffusivity_eulerian,
    mean_drift_eulerian,
    solve_cell_problem,
    solve_invariant_density,
)
from .montecarlo import (
    DiffusivityEstimate,
    EnsembleConfig,
    EnsembleResult,
    convergence_study,
    effective_diffusivity_estimate,
    invariant_histogram,
    mean_drift_estimate,
    simulate_ensemble,
)
from .schemes import SchemeConfig, em_step, milstein_step, modified_milstein_step, step

__version__ = "0.1.0"
