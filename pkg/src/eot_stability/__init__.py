from .diagnostics import (
    NormalizedPotentials,
    condition_report,
    dual_value,
    normalize,
    primal_value,
    schroedinger_residual,
)
from .harness import ExperimentConfig, emit_report, sinkhorn_trace, stability_sweep
from .measures import (
    CostMatrix,
    DiscreteMeasure,
    PerturbationSpec,
    build_cost,
    perturb,
    sample_subgaussian,
)
from .oracle import brute_force_solve, oracle_check
from .sinkhorn import Coupling, Potentials, SolveReport, solve

__all__ = [
    "DiscreteMeasure",
    "CostMatrix",
    "PerturbationSpec",
    "build_cost",
    "perturb",
    "sample_subgaussian",
    "Potentials",
    "Coupling",
    "SolveReport",
    "solve",
    "NormalizedPotentials",
    "normalize",
    "schroedinger_residual",
    "primal_value",
    "dual_value",
    "condition_report",
    "brute_force_solve",
    "oracle_check",
    "ExperimentConfig",
    "stability_sweep",
    "sinkhorn_trace",
    "emit_report",
]
