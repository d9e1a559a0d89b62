"""Discontinuous Galerkin solver for 1D viscosity-capillarity elastodynamics."""

__version__ = "0.1.0"

from .mesh_basis import (  # noqa: E402
    BoundaryMode,
    DgFunction,
    Ghost,
    Mesh1D,
    QuadratureRule,
    build_mesh,
    dg_norms,
    inner_product,
    l2_project,
    legendre_eval,
)
from .operators import (  # noqa: E402
    DgOperator,
    LinearSolveError,
    OpKind,
    PenaltyConfig,
    discrete_laplacian,
    duality_defect,
    grad_minus,
    grad_plus,
    ip_form,
    kernel_rank,
    q_projection,
    r_projection,
    riesz_projection,
    s_projection,
)
from .dynamics import (  # noqa: E402
    EnergyLog,
    ModelParams,
    NewtonDivergence,
    State,
    discrete_energy,
    evolve,
    jacobian,
    modified_entropy,
    recover_tau,
    reduced_relative_entropy,
    rhs,
    step_crank_nicolson,
)
from .verification import (  # noqa: E402
    ConvergenceReport,
    ExactSolution,
    dense_oracle,
    eoc,
    error_norms,
    projection_residual_audit,
    run_convergence_study,
    tanh_steady_state,
)
