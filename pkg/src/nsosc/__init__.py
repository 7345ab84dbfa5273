"""Statistics of constrained stochastic oscillators, two ways.

The package evaluates means, moments and correlations of the white-noise
driven elasto-plastic oscillator and vibro-impact oscillator by

* solving the associated Kolmogorov problems with non-standard boundary
  rows on a finite-difference grid (``operators``, ``pde``,
  ``superposition``), and
* simulating the constrained dynamics directly (``mc``),

with each quantity defined once (``model``) and consumed by both routes.
"""

from .model import (
    OscillatorKind,
    OscillatorParams,
    Pipeline,
    QuantitySpec,
    elastoplastic_params,
    expand_preset,
    obstacle_params,
    preset_names,
)
from .operators import (
    DiscreteOperator,
    Grid,
    NodeRole,
    RowKind,
    assemble_elastoplastic,
    assemble_free_box,
    assemble_obstacle,
    build_grid,
    classify_nodes,
    dy_matrix,
    evaluate_on_grid,
)
from .pde import (
    CorrelationSolution,
    EllipticResult,
    FieldSolution,
    GrowthRateResult,
    ParabolicRun,
    StationaryResult,
    elliptic_B_solve,
    growth_rate_solve,
    parabolic_march,
    solve_w_chain,
    stationary_solve,
)
from .mc import (
    CycleStats,
    ExactStepTables,
    InsufficientCyclesError,
    McConfig,
    McEstimate,
    McTrace,
    build_exact_tables,
    estimate_quantity,
    long_cycle_rate,
    step_elastoplastic,
    step_obstacle,
    substepped_euler_moments,
    trace_quantity,
)
from .superposition import (
    GluedSolution,
    GluingError,
    LocalTriple,
    glue,
    solve_local_triple,
    stationary_by_superposition,
)
from .experiments import (
    CompareReport,
    ExperimentConfig,
    ResultSet,
    compare_report,
    load_config,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
