"""
Experiment orchestration: marginal-perturbation stability sweeps, Sinkhorn
iterate traces and deterministic report files.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import rel_entr

from .const import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    OUTPUT_DIR,
    POTENTIAL_UNITS,
    REFERENCE_FACTOR,
    TRACE_REFERENCE_FACTOR,
    WEAK_METRIC_LABEL,
)
from .diagnostics import (
    ConditionReport,
    NormalizedPotentials,
    condition_report,
    dual_value,
    exp_moment,
    extend_potential,
    normalize,
)
from .exceptions import ReferenceNotConvergedError
from .hash import config_digest
from .measures import (
    CostKind,
    CostMatrix,
    DiscreteMeasure,
    MeasureModel,
    PerturbationSpec,
    SamplerFamily,
    build_cost,
    load_cost_matrix,
    perturb,
    same_support,
    sample_subgaussian,
)
from .metrics import (
    MetricValue,
    bl_dictionary_meta,
    bounded_lipschitz,
    ky_fan,
    ky_fan_sum,
    pushforward_kolmogorov,
    pushforward_levy,
    tv_distance,
    tv_distance_couplings,
)
from .sinkhorn import CostLike, SolveReport, cost_values, sinkhorn_iterates, solve
from .utils import PathLike, decode_float, read_csv, read_json, write_csv, write_json

logger = logging.getLogger(__name__)

SWEEP_METRICS: Tuple[str, ...] = (
    "tv_coupling",
    "ky_fan_f",
    "ky_fan_g",
    "ky_fan_sum",
    "kolmogorov_f",
    "kolmogorov_g",
    "levy_f",
    "levy_g",
    "bounded_lipschitz",
    "value_gap",
    "mean_f",
    "mean_g",
    "sup_f",
    "sup_g",
    "tv_marginals",
)

TRACE_METRICS: Tuple[str, ...] = (
    "entropy_sum",
    "tv_coupling",
    "dual_value",
    "tv_row_marginal",
    "tv_col_marginal",
    "f_plus_mean",
    "g_plus_mean",
    "exp_moment",
)

TRACE_CSV_HEADER = ["index", "metric", "value", "converged"]
CONDITIONS_CSV_HEADER = ["n", "quantity", "value"]


class SamplerDirective(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_atoms: int = Field(ge=1)
    d: int = Field(default=1, ge=1)
    family: SamplerFamily = "gaussian"
    seed: Optional[int] = None


class MarginalSpec(BaseModel):
    """Either an inline measure or a sampler directive."""

    model_config = ConfigDict(extra="forbid")

    atoms: Optional[List[List[float]]] = None
    weights: Optional[List[float]] = None
    normalize: bool = False
    sampler: Optional[SamplerDirective] = None

    @model_validator(mode="after")
    def _one_source(self) -> "MarginalSpec":
        inline = self.atoms is not None or self.weights is not None
        if inline == (self.sampler is not None):
            raise ValueError("give either atoms and weights or a sampler, not both")
        if inline and (self.atoms is None or self.weights is None):
            raise ValueError("inline measures need both atoms and weights")
        return self

    def build(self, default_seed: int) -> DiscreteMeasure:
        if self.sampler is not None:
            s = self.sampler
            seed = default_seed if s.seed is None else s.seed
            return sample_subgaussian(s.n_atoms, s.d, s.family, seed)
        return MeasureModel(
            atoms=self.atoms, weights=self.weights, normalize=self.normalize
        ).to_measure()


class MarginalsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: MarginalSpec
    target: MarginalSpec


class CostConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: CostKind = CostKind.SQEUCLIDEAN
    matrix: Optional[List[List[float]]] = None
    path: Optional[str] = None

    @model_validator(mode="after")
    def _matrix_given(self) -> "CostConfig":
        if self.kind is CostKind.MATRIX and (self.matrix is None) == (self.path is None):
            raise ValueError("cost kind 'matrix' needs exactly one of 'matrix' or 'path'")
        return self


class SolverConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tol: float = Field(default=DEFAULT_TOL, gt=0)
    max_iter: int = Field(default=DEFAULT_MAX_ITER, ge=1)
    reference_factor: float = Field(default=REFERENCE_FACTOR, ge=1)
    trace_reference_factor: float = Field(default=TRACE_REFERENCE_FACTOR, ge=1)


class OutputConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: Path = OUTPUT_DIR
    format: Literal["csv", "json"] = "csv"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    marginals: MarginalsConfig
    cost: CostConfig = CostConfig()
    epsilons: List[float] = Field(min_length=1)
    perturbation: Optional[PerturbationSpec] = None
    solver: SolverConfig = SolverConfig()
    metrics: Optional[List[str]] = Field(default=None, min_length=1)
    output: OutputConfig = OutputConfig()
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    betas: List[float] = Field(default_factory=list)
    tail_levels: List[float] = Field(default_factory=lambda: [1.0, 2.0])

    @field_validator("epsilons")
    @classmethod
    def _positive_eps(cls, epsilons: List[float]) -> List[float]:
        if any(not (e > 0 and math.isfinite(e)) for e in epsilons):
            raise ValueError("every epsilon must be positive and finite")
        return epsilons

    @field_validator("metrics")
    @classmethod
    def _known_metrics(cls, metrics: Optional[List[str]]) -> Optional[List[str]]:
        if metrics is None:
            return None
        unknown = sorted(set(metrics) - set(SWEEP_METRICS) - set(TRACE_METRICS))
        if unknown:
            raise ValueError(f"unknown metrics: {', '.join(unknown)}")
        return metrics

    @field_validator("betas")
    @classmethod
    def _positive_betas(cls, betas: List[float]) -> List[float]:
        if any(not b > 0 for b in betas):
            raise ValueError("betas must be positive")
        return betas

    @field_validator("tail_levels")
    @classmethod
    def _nonnegative_levels(cls, levels: List[float]) -> List[float]:
        if any(not c >= 0 for c in levels):
            raise ValueError("tail levels must be nonnegative")
        return levels

    @model_validator(mode="after")
    def _jitter_needs_geometry(self) -> "ExperimentConfig":
        if (
            self.perturbation is not None
            and self.perturbation.mode == "support-jitter"
            and self.cost.kind is CostKind.MATRIX
        ):
            raise ValueError("support-jitter moves atoms and cannot reuse a fixed cost matrix")
        return self

    def digest(self) -> str:
        return config_digest(self.model_dump(mode="json", exclude={"output", "workers"}))


def load_config(path: PathLike) -> ExperimentConfig:
    """Read and validate a JSON experiment config; raises ``pydantic.ValidationError``."""
    return ExperimentConfig.model_validate(read_json(path))


def apply_overrides(cfg: ExperimentConfig, **flags) -> ExperimentConfig:
    """
    Apply command-line values on top of a config; ``None`` means "not given".

    Recognized flags: eps, tol, max_iter, seed, out, format, workers.
    """
    data = cfg.model_dump()
    if flags.get("eps") is not None:
        data["epsilons"] = [flags["eps"]]
    if flags.get("tol") is not None:
        data["solver"]["tol"] = flags["tol"]
    if flags.get("max_iter") is not None:
        data["solver"]["max_iter"] = flags["max_iter"]
    if flags.get("seed") is not None:
        data["seed"] = flags["seed"]
        if data.get("perturbation") is not None:
            data["perturbation"]["seed"] = flags["seed"]
    if flags.get("out") is not None:
        data["output"]["dir"] = flags["out"]
    if flags.get("format") is not None:
        data["output"]["format"] = flags["format"]
    if flags.get("workers") is not None:
        data["workers"] = flags["workers"]
    return ExperimentConfig.model_validate(data)


def resolve_marginals(cfg: ExperimentConfig) -> Tuple[DiscreteMeasure, DiscreteMeasure]:
    """Build (mu, nu); sampled targets default to ``seed + 1``."""
    mu = cfg.marginals.source.build(cfg.seed)
    nu = cfg.marginals.target.build(cfg.seed + 1)
    return mu, nu


def resolve_cost(cfg: ExperimentConfig, mu: DiscreteMeasure, nu: DiscreteMeasure) -> CostMatrix:
    kind = cfg.cost.kind
    if kind is CostKind.MATRIX:
        matrix = cfg.cost.matrix if cfg.cost.matrix is not None else load_cost_matrix(cfg.cost.path)
        return build_cost(mu, nu, kind, matrix)
    return build_cost(mu, nu, kind)


@dataclass(frozen=True)
class TraceRow:
    index: int
    metric: str
    value: float
    converged: bool
    eps: Optional[float] = None
    snapshot: Optional[int] = None

    def as_csv(self) -> list:
        return [self.index, self.metric, float(self.value), "true" if self.converged else "false"]

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "metric": self.metric,
            "value": self.value,
            "converged": self.converged,
        }


@dataclass
class ConvergenceTrace:
    """Rows of (index, metric, value, converged) plus condition snapshots."""

    kind: str
    metrics: List[str]
    rows: List[TraceRow] = field(default_factory=list)
    conditions: List[Tuple[int, str, float]] = field(default_factory=list)
    meta: Dict[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, metric: str, converged_only: bool = False) -> List[float]:
        return [
            r.value
            for r in self.rows
            if r.metric == metric and (r.converged or not converged_only)
        ]

    def indices(self, metric: str) -> List[int]:
        return [r.index for r in self.rows if r.metric == metric]

    def first_last(self, metric: str, converged_only: bool = True) -> Tuple[float, float]:
        values = self.column(metric, converged_only)
        if not values:
            raise KeyError(f"no rows recorded for metric {metric!r}")
        return values[0], values[-1]


def _metric_label(metric: str, eps: float, multi: bool) -> str:
    return f"{metric}@eps={eps:g}" if multi else metric


def default_betas(C: CostLike) -> List[float]:
    """One over the largest cost, or 1 when no cost is positive."""
    max_cost = float(cost_values(C).max())
    return [1.0 / max_cost if max_cost > 0 else 1.0]


@dataclass(frozen=True, eq=False)
class _Reference:
    report: SolveReport
    potentials: NormalizedPotentials
    dual: float


def _reference_solve(
    mu: DiscreteMeasure, nu: DiscreteMeasure, C: CostLike, eps: float, tol: float, max_iter: int
) -> _Reference:
    report = solve(mu, nu, C, eps, tol=tol, max_iter=max_iter)
    if not report.converged:
        raise ReferenceNotConvergedError(
            f"reference solve at eps={eps:g} did not reach tol={tol:.1e} "
            f"within {max_iter} iterations (error {report.marginal_error:.3e})"
        )
    p = normalize(report.potentials, mu, 0.0)
    return _Reference(report, p, dual_value(p, mu, nu))


@dataclass(frozen=True, eq=False)
class _SweepResult:
    eps: float
    n: int
    converged: bool
    values: Dict[str, MetricValue]
    conditions: ConditionReport


def _sweep_point(
    cfg: ExperimentConfig,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    C: CostMatrix,
    eps: float,
    n: int,
    ref: _Reference,
    betas: List[float],
) -> _SweepResult:
    spec = cfg.perturbation
    mu_n = perturb(mu, spec, n)
    nu_n = perturb(nu, spec.for_target(), n)
    kind = cfg.cost.kind
    C_n = C if same_support(mu_n, mu) and same_support(nu_n, nu) else build_cost(mu_n, nu_n, kind)

    if mu_n is mu and nu_n is nu:
        # a zero schedule entry reproduces the limit instance exactly
        report = ref.report
    else:
        report = solve(mu_n, nu_n, C_n, eps, tol=cfg.solver.tol, max_iter=cfg.solver.max_iter)
    p_n = normalize(report.potentials, mu_n, 0.0)
    p = ref.potentials
    selected = set(SWEEP_METRICS if cfg.metrics is None else cfg.metrics)
    values: Dict[str, MetricValue] = {}

    def record(name: str, compute) -> None:
        if name in selected:
            values[name] = MetricValue(name, float(compute()))

    record("tv_coupling", lambda: tv_distance_couplings(report.coupling, ref.report.coupling))
    record("ky_fan_f", lambda: ky_fan(p_n.f, p.f, mu, support=mu_n))
    record("ky_fan_g", lambda: ky_fan(p_n.g, p.g, nu, support=nu_n))
    record(
        "ky_fan_sum",
        lambda: ky_fan_sum(p_n.potentials, p.potentials, mu, nu, support=(mu_n, nu_n)),
    )
    record("kolmogorov_f", lambda: pushforward_kolmogorov(p_n.f, mu_n, p.f, mu))
    record("kolmogorov_g", lambda: pushforward_kolmogorov(p_n.g, nu_n, p.g, nu))
    record("levy_f", lambda: pushforward_levy(p_n.f, mu_n, p.f, mu))
    record("levy_g", lambda: pushforward_levy(p_n.g, nu_n, p.g, nu))
    record("bounded_lipschitz", lambda: bounded_lipschitz(report.coupling, ref.report.coupling))
    record("value_gap", lambda: abs(dual_value(p_n, mu_n, nu_n) - ref.dual))
    record("mean_f", lambda: abs(mu_n.mean(p_n.f) - mu.mean(p.f)))
    record("mean_g", lambda: abs(nu_n.mean(p_n.g) - nu.mean(p.g)))
    record("sup_f", lambda: _sup_gap(p_n, mu_n, nu_n, p, mu, nu, kind, "f"))
    record("sup_g", lambda: _sup_gap(p_n, mu_n, nu_n, p, mu, nu, kind, "g"))
    record("tv_marginals", lambda: max(tv_distance(mu_n, mu), tv_distance(nu_n, nu)))

    conditions = condition_report(
        p_n, mu_n, nu_n, mu, nu, C_n, betas=betas, tail_levels=cfg.tail_levels
    )
    logger.info(
        "sweep eps=%g n=%d converged=%s iterations=%d", eps, n, report.converged, report.iterations
    )
    return _SweepResult(eps, n, report.converged, values, conditions)


def _sup_gap(
    p_n: NormalizedPotentials,
    mu_n: DiscreteMeasure,
    nu_n: DiscreteMeasure,
    p: NormalizedPotentials,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    kind: CostKind,
    side: str,
) -> float:
    """Sup-norm gap of a potential on the limit support, extending f_n (g_n) there if needed."""
    if side == "f":
        if same_support(mu_n, mu):
            return float(np.abs(p_n.f - p.f).max())
        extended = extend_potential(p_n, build_cost(mu, nu_n, kind), nu_n, "f")
        return float(np.abs(extended - p.f).max())
    if same_support(nu_n, nu):
        return float(np.abs(p_n.g - p.g).max())
    extended = extend_potential(p_n, build_cost(mu_n, nu, kind), mu_n, "g")
    return float(np.abs(extended - p.g).max())


def stability_sweep(cfg: ExperimentConfig) -> ConvergenceTrace:
    """
    Solve every perturbed instance (mu_n, nu_n) for each epsilon and compare it
    with the unperturbed solution computed at ``tol / reference_factor``.

    Tasks run on a thread pool of ``cfg.workers`` threads; results are merged
    in (epsilon, n) order so reports do not depend on the pool size.
    Condition snapshots use ``cfg.betas``, or one over the largest limit cost
    when none are configured.

    Raises:
        ReferenceNotConvergedError: if an unperturbed reference solve fails.
    """
    if cfg.perturbation is None:
        raise ValueError("a stability sweep needs a 'perturbation' section")
    mu, nu = resolve_marginals(cfg)
    C = resolve_cost(cfg, mu, nu)
    selected = [m for m in SWEEP_METRICS if cfg.metrics is None or m in cfg.metrics]
    if not selected:
        raise ValueError("none of the configured metrics applies to a sweep")
    multi = len(cfg.epsilons) > 1
    length = len(cfg.perturbation.schedule)
    betas = list(cfg.betas) or default_betas(C)

    ref_tol = cfg.solver.tol / cfg.solver.reference_factor
    references = {
        eps: _reference_solve(mu, nu, C, eps, ref_tol, cfg.solver.max_iter) for eps in cfg.epsilons
    }
    tasks = [(eps, n) for eps in cfg.epsilons for n in range(1, length + 1)]
    logger.info("running %d sweep points on %d worker(s)", len(tasks), cfg.workers)

    def run(task: Tuple[float, int]) -> _SweepResult:
        eps, n = task
        return _sweep_point(cfg, mu, nu, C, eps, n, references[eps], betas)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        results = list(pool.map(run, tasks))

    trace = ConvergenceTrace(kind="sweep", metrics=selected)
    for result in results:
        for metric in selected:
            trace.rows.append(
                TraceRow(
                    index=result.n,
                    metric=_metric_label(metric, result.eps, multi),
                    value=result.values[metric].value,
                    converged=result.converged,
                    eps=result.eps,
                    snapshot=result.n,
                )
            )
        for quantity, value in result.conditions.rows():
            trace.conditions.append((result.n, _metric_label(quantity, result.eps, multi), value))

    trace.meta = report_meta(cfg, "sweep")
    trace.meta["betas"] = betas
    return trace


def sinkhorn_trace(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    C: CostLike,
    eps: float,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    betas: Optional[Sequence[float]] = None,
    metrics: Optional[Iterable[str]] = None,
    reference_factor: float = TRACE_REFERENCE_FACTOR,
) -> ConvergenceTrace:
    """
    Record the primal iterates pi_1, pi_2, ... of Sinkhorn against the limit
    coupling from a reference solve at ``tol / reference_factor``.

    The trace stops after the first full iteration whose two iterates are
    within ``tol`` of the limit in total variation and whose marginal entropy
    sums are below ``tol``, or after ``max_iter`` full iterations. The
    exponential moment of the cost is recorded once, at index 1; ``beta``
    defaults to one over the largest cost.

    Raises:
        ReferenceNotConvergedError: if the reference solve does not converge.
    """
    selected = [m for m in TRACE_METRICS if metrics is None or m in set(metrics)]
    ref = _reference_solve(mu, nu, C, eps, tol / reference_factor, max(max_iter, DEFAULT_MAX_ITER))
    pi_star = ref.report.coupling.matrix
    c = cost_values(C)
    betas = list(betas) if betas else default_betas(c)

    pending: List[Tuple[int, str, float]] = []

    def record(n: int, name: str, value: float) -> None:
        if name in selected:
            pending.append((n, name, float(value)))

    converged = False
    for state in sinkhorn_iterates(mu, nu, C, eps):
        done = True
        for n in (2 * state.t - 1, 2 * state.t):
            pi = state.coupling(n)
            row, col = pi.row_sums(), pi.col_sums()
            p_n = state.iterate_potentials(n)
            entropy = _entropy_sum(row, mu.weights) + _entropy_sum(col, nu.weights)
            tv = 0.5 * float(np.abs(pi.matrix - pi_star).sum())

            record(n, "entropy_sum", entropy)
            record(n, "tv_coupling", tv)
            record(n, "dual_value", float(row @ p_n.f + col @ p_n.g))
            record(n, "tv_row_marginal", 0.5 * float(np.abs(row - mu.weights).sum()))
            record(n, "tv_col_marginal", 0.5 * float(np.abs(col - nu.weights).sum()))
            record(n, "f_plus_mean", float(row @ np.maximum(p_n.f, 0.0)))
            record(n, "g_plus_mean", float(col @ np.maximum(p_n.g, 0.0)))
            if n == 1:
                for beta in betas:
                    name = "exp_moment" if len(betas) == 1 else f"exp_moment@beta={beta:g}"
                    if "exp_moment" in selected:
                        pending.append((n, name, exp_moment(c, mu, nu, beta)))
            done = done and tv <= tol and entropy <= tol
        if done:
            converged = True
            logger.info("sinkhorn trace reached tol=%.1e at t=%d", tol, state.t)
            break
        if state.t >= max_iter:
            logger.warning("sinkhorn trace stopped at max_iter=%d", max_iter)
            break

    trace = ConvergenceTrace(kind="trace", metrics=selected)
    trace.rows = [TraceRow(n, name, value, converged, eps) for n, name, value in pending]
    trace.meta = {
        "kind": "trace",
        "eps": eps,
        "tol": tol,
        "reference_tol": tol / reference_factor,
        "betas": list(betas),
        "potential_units": POTENTIAL_UNITS,
    }
    return trace


def _entropy_sum(weights: np.ndarray, reference: np.ndarray) -> float:
    total = weights.sum()
    return max(0.0, float(rel_entr(weights / total, reference).sum()))


def report_meta(cfg: Optional[ExperimentConfig], kind: str) -> Dict[str, object]:
    dictionary = bl_dictionary_meta()
    meta: Dict[str, object] = {
        "kind": kind,
        "bl_dictionary_version": dictionary["version"],
        "bl_dictionary": dictionary["functions"],
        "potential_units": POTENTIAL_UNITS,
        "weak_metric": WEAK_METRIC_LABEL,
        "sentinel": "inf marks undefined or inapplicable values",
    }
    if cfg is not None:
        meta["config_sha256"] = cfg.digest()
        meta["epsilons"] = list(cfg.epsilons)
        meta["seed"] = cfg.seed
    return meta


def emit_report(
    trace: ConvergenceTrace, format: Literal["csv", "json"], directory: PathLike
) -> List[Path]:
    """
    Write the trace, its condition snapshots and ``meta.json`` into ``directory``.

    Files contain no timestamps, so identical traces give byte-identical files.

    Raises:
        ReportError: on any I/O failure, with the offending path.
    """
    directory = Path(directory)
    paths: List[Path] = []
    if format == "csv":
        paths.append(write_csv(directory / "trace.csv", TRACE_CSV_HEADER, (r.as_csv() for r in trace.rows)))
    elif format == "json":
        paths.append(
            write_json(
                directory / "trace.json",
                {"kind": trace.kind, "rows": [r.to_dict() for r in trace.rows]},
            )
        )
    else:
        raise ValueError(f"unknown report format: {format!r}")
    paths.append(write_csv(directory / "conditions.csv", CONDITIONS_CSV_HEADER, trace.conditions))
    paths.append(write_json(directory / "meta.json", trace.meta))
    return paths


def load_trace(path: PathLike) -> List[TraceRow]:
    """Parse a ``trace.csv`` or ``trace.json`` back into rows."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = read_json(path)
        return [
            TraceRow(int(r["index"]), r["metric"], decode_float(r["value"]), bool(r["converged"]))
            for r in data["rows"]
        ]
    header, rows = read_csv(path)
    if header != TRACE_CSV_HEADER:
        raise ValueError(f"unexpected trace header {header!r}")
    return [
        TraceRow(int(index), metric, decode_float(value), converged == "true")
        for index, metric, value, converged in rows
    ]
