"""Parallel Wiener-Hammerstein identification from Volterra kernels.

The kernels of a parallel Wiener-Hammerstein model are structured canonical
polyadic decompositions that share their factors across degrees; fitting
those factors jointly to least-squares kernel estimates recovers the filters
and polynomial coefficients of every branch.
"""
from .decomposer import (
    DecisionVariables,
    FitResult,
    LMOptions,
    assemble_factors,
    extract_model,
    fit_joint_cpd,
    joint_cost,
    joint_gradient,
    model_kernel,
    multistart,
    parameter_error,
    parameterize,
)
from .estimators import ParallelWienerHammerstein, VolterraRegressor
from .system import (
    FirFilter,
    ParallelWhModel,
    PolyNonlinearity,
    add_output_noise,
    analytic_kernels,
    build_p_matrix,
    sample_random_model,
    simulate,
)
from .volterra import build_regression, enumerate_monomials, estimate_kernels, volterra_predict

__version__ = "0.1.0"

__all__ = [
    "DecisionVariables",
    "FitResult",
    "LMOptions",
    "FirFilter",
    "ParallelWhModel",
    "ParallelWienerHammerstein",
    "PolyNonlinearity",
    "VolterraRegressor",
    "add_output_noise",
    "analytic_kernels",
    "assemble_factors",
    "build_p_matrix",
    "build_regression",
    "enumerate_monomials",
    "estimate_kernels",
    "extract_model",
    "fit_joint_cpd",
    "joint_cost",
    "joint_gradient",
    "model_kernel",
    "multistart",
    "parameter_error",
    "parameterize",
    "sample_random_model",
    "simulate",
    "volterra_predict",
]
