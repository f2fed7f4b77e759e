"""Potential mean field games on periodic grids: forward solves and
recovery of environment parameters from partial density observations."""

from .grid import (
    StationaryConstraint,
    TimeDependentConstraint,
    TimeGrid,
    TorusGrid,
    apply_constraint,
    cone_violation,
    divergence,
    divergence_adjoint,
    divergence_matrix,
    laplacian,
    laplacian_matrix,
    mass,
    operator_norm,
    project_cone,
)
from .gp import AnchorSet, GPRepresenter, KernelSpec, gram
from .coupling import (
    BasisExpansion,
    ConvexLibrary,
    CouplingModel,
    FixedCoupling,
    GPPseudo,
    PowerLaw,
    entropy_coupling,
    monomial_coupling,
    zero_coupling,
)
from .prox import ProxError, ProxQuery, prox_batch, prox_cell, prox_residual
from .forward import (
    MFGProblem,
    SaddleState,
    SolverError,
    kinetic_cost,
    objective_value,
    solve_stationary,
    solve_time_dependent,
)
from .infsup import InfSupProblem, InfSupState, solve_infsup

__version__ = "0.1.0"

__all__ = [
    "TorusGrid",
    "TimeGrid",
    "laplacian",
    "divergence",
    "divergence_adjoint",
    "laplacian_matrix",
    "divergence_matrix",
    "project_cone",
    "cone_violation",
    "mass",
    "operator_norm",
    "apply_constraint",
    "StationaryConstraint",
    "TimeDependentConstraint",
    "KernelSpec",
    "AnchorSet",
    "GPRepresenter",
    "gram",
    "CouplingModel",
    "FixedCoupling",
    "PowerLaw",
    "ConvexLibrary",
    "BasisExpansion",
    "GPPseudo",
    "entropy_coupling",
    "monomial_coupling",
    "zero_coupling",
    "ProxQuery",
    "ProxError",
    "prox_cell",
    "prox_batch",
    "prox_residual",
    "MFGProblem",
    "SaddleState",
    "SolverError",
    "solve_stationary",
    "solve_time_dependent",
    "kinetic_cost",
    "objective_value",
    "InfSupProblem",
    "InfSupState",
    "solve_infsup",
    "__version__",
]
