"""Variance-reduced stochastic solvers for finite-sum cocoercive
variational inequalities, with a bilinear saddle-point benchmark harness
and an empirical verification suite for their convergence guarantees."""

__version__ = "0.1.0"

from .problems import (
    AssumptionReport,
    BilinearComponent,
    BilinearProblem,
    FiniteSumProblem,
    GenerationError,
    GeneratorSpec,
    OracleCounter,
    SpectralNormError,
    check_cocoercivity,
    check_strong_monotonicity,
    generate_bilinear,
    load_problem,
    save_problem,
    solve_exact,
    spectral_norm,
)
from .solvers import (
    Checkpoint,
    Method,
    ReplayResult,
    RunRecord,
    SolverConfig,
    replay_check,
    run,
    run_sarah,
    run_sgd,
    run_svrg,
    theorem_preset,
    write_run_csv,
    write_run_metadata,
)
from .analysis import (
    AggregateStats,
    ComplexityAudit,
    ContractionReport,
    Lemma1Report,
    Lemma2Report,
    aggregate,
    complexity_audit,
    verify_lemma1,
    verify_lemma2,
    verify_theorem1,
)
from .harness import (
    ComparisonTable,
    ConfigError,
    ExperimentConfig,
    GridSearchError,
    emit_plot,
    grid_search,
    parse_config,
    run_experiment,
    verify_cli,
)

__all__ = [name for name in dir() if not name.startswith("_")]
