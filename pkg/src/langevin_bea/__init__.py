"""Implicit Langevin integrators with weak backward error analysis diagnostics."""

__version__ = "0.1.0"

from .polynomials import Poly, format_poly, monomial_basis, parse_poly
from .potentials import (
    PotentialAudit,
    PotentialModel,
    audit_assumptions,
    double_well,
    make_potential,
    quadratic,
    quartic,
    semiconvexity_constant,
)
from .noise import NoiseSource
from .integrators import (
    DeltaBounds,
    PhaseState,
    SolverConfig,
    StepParams,
    delta_max,
    simulate,
    solve_implicit_position,
    step,
)
from .lyapunov import (
    check_drift_inequality,
    gamma,
    gamma_delta,
    moment_sweep,
    weighted_norm,
)
from .generators import (
    GibbsMeasure,
    OperatorMatrix,
    apply_operator,
    build_operator_matrix,
    product_rule_defect,
    semigroup_apply,
    solve_poisson,
)
from .expansion import (
    DriftExpansion,
    MeasureExpansion,
    ModifiedFlow,
    OperatorSeries,
    assemble_An,
    build_A_series,
    drift_coefficients,
    measure_expansion,
    modified_flow,
    modified_operators,
    one_step_weak_coefficients,
    taylor_drift_check,
)
from .harness import (
    EstimateWithCI,
    OrderFit,
    OUReference,
    estimate_expectation,
    exact_ou_reference,
    gaussian_expectation,
    invariant_bias,
    mixing_rate,
    weak_error_order,
)
