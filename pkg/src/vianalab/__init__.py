"""Numerical laboratory for coupled expanding-base skew products.

The package builds fiber maps with a critical point of arbitrary order,
measures the constants behind their non-uniform expansion, constructs the
rectangle partition subordinate to hyperbolic return times, and runs a
statistics pipeline (invariant densities, Lyapunov exponents, correlation
decay, a central-limit check, and mixing diagnostics) on top of it.
"""

from .errors import (
    ConfigurationError,
    ConstructionError,
    ConvergenceError,
    CriticalHitError,
    DependencyError,
    InvarianceError,
    LemmaViolationError,
    NoParameterError,
    PeriodicOrbitError,
    VianaLabError,
)
from .maps import (
    DerivedConstants,
    FiberMap,
    MapParams,
    binding_audit,
    build_even_map,
    build_map,
    build_odd_map,
    critical_orbit_check,
    default_params,
    estimate_binding_constants,
    eval_fiber_derivative,
    eval_phi,
    inner_amplitude,
    invariant_interval,
    solve_a0,
    step_arrays,
)
from .orbits import (
    INFINITE_DEPTH,
    BaseStream,
    EnsembleTracker,
    Orbit,
    PhasePoint,
    ReturnStructure,
    comparison_bound_check,
    deep_depth_threshold,
    derivative_lower_bound_check,
    exceptional_decay_fit,
    exceptional_membership,
    iterate_orbit,
    nue_and_slow_approx,
    params_fingerprint,
    return_index,
    return_indices,
    signed_return_index,
    sweep_ensemble,
    truncated_log_distance,
)
from .hyperbolic import (
    HyperbolicEnsemble,
    HyperbolicRecord,
    classify,
    coverage_check,
    density_across_seeds,
    hyperbolic_ensemble,
    pliss_times,
    pliss_times_matrix,
    remark_budget_check,
)
from .stats import (
    DEFAULT_GRID,
    CltReport,
    CorrelationSeries,
    DensityEstimate,
    GridSpec,
    Observable,
    UlamOperator,
    analytic_fiber_cell_masses,
    assemble_ulam,
    birkhoff_density,
    clt_test,
    correlation_empirical,
    correlation_operator,
    invariance_functional_check,
    lyapunov,
    lyapunov_ensemble,
    make_observables,
    sample_from_density,
    stationary_density,
    step_points,
)

__version__ = "0.1.0"
