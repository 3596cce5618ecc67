"""Catalogue of closed-form sanity checks run by ``eot-stability selftest``."""

from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List

import numpy as np

from . import diagnostics, harness, measures, metrics, oracle, sinkhorn
from .measures import DiscreteMeasure, PerturbationSpec
from .sinkhorn import Coupling, Potentials

logger = logging.getLogger(__name__)

CheckFn = Callable[[], bool]


@dataclass(frozen=True)
class SelfCheck:
    module: str
    name: str
    fn: CheckFn


@dataclass(frozen=True)
class CheckOutcome:
    module: str
    name: str
    passed: bool
    detail: str = ""


CHECKS: List[SelfCheck] = []


def check(module: str, name: str) -> Callable[[CheckFn], CheckFn]:
    def decorator(fn: CheckFn) -> CheckFn:
        CHECKS.append(SelfCheck(module, name, fn))
        return fn

    return decorator


def _close(a, b, tol: float = 1e-12) -> bool:
    return bool(np.allclose(a, b, rtol=0.0, atol=tol))


def _point(*coords: float) -> DiscreteMeasure:
    return DiscreteMeasure([list(coords)], [1.0])


def _pair() -> DiscreteMeasure:
    return DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])


# measures


@check("measures", "build_cost: coincident points cost 0")
def _cost_coincident() -> bool:
    return measures.build_cost(_point(0.0), _point(0.0)).values[0, 0] == 0.0


@check("measures", "build_cost: (1,0) to (0,0) costs 1")
def _cost_unit() -> bool:
    return measures.build_cost(_point(1.0, 0.0), _point(0.0, 0.0)).values[0, 0] == 1.0


@check("measures", "build_cost: (1,2) to (3,5) costs 13")
def _cost_thirteen() -> bool:
    return measures.build_cost(_point(1.0, 2.0), _point(3.0, 5.0)).values[0, 0] == 13.0


@check("measures", "sample_subgaussian: one atom has weight 1")
def _sample_one() -> bool:
    return all(
        len(m) == 1 and m.weights[0] == 1.0
        for m in (
            measures.sample_subgaussian(1, 2, family, seed)
            for family in ("gaussian", "gaussian-mixture", "uniform-box")
            for seed in (0, 7)
        )
    )


@check("measures", "sample_subgaussian: four atoms have uniform weights")
def _sample_four() -> bool:
    return _close(measures.sample_subgaussian(4, 1, "gaussian", 7).weights, [0.25] * 4)


@check("measures", "perturb: zero magnitude returns the base measure")
def _perturb_zero() -> bool:
    base = _pair()
    spec = PerturbationSpec(mode="weight-jitter", schedule=[0.1, 0.0], seed=3)
    return measures.perturb(base, spec, 2) == base


@check("measures", "perturb: weight-jitter stays within delta in TV")
def _perturb_weight() -> bool:
    base = _pair()
    spec = PerturbationSpec(mode="weight-jitter", schedule=[0.1], seed=3)
    return metrics.tv_distance(measures.perturb(base, spec, 1), base) <= 0.1


@check("measures", "perturb: support-jitter moves atoms by at most delta")
def _perturb_support() -> bool:
    base = DiscreteMeasure.uniform([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    spec = PerturbationSpec(mode="support-jitter", schedule=[0.01], seed=3)
    moved = measures.perturb(base, spec, 1)
    return bool(np.all(np.linalg.norm(moved.atoms - base.atoms, axis=1) <= 0.01))


# sinkhorn


@check("sinkhorn", "half steps: zero cost and potential give zero")
def _half_zero() -> bool:
    mu = DiscreteMeasure.uniform([[0.0], [1.0], [2.0]])
    zeros = np.zeros((3, 3))
    return _close(sinkhorn.half_step_psi(np.zeros(3), zeros, mu, 1.0), 0.0) and _close(
        sinkhorn.half_step_phi(np.zeros(3), zeros, mu, 1.0), 0.0
    )


@check("sinkhorn", "half steps: a single atom returns its cost")
def _half_single() -> bool:
    C = np.array([[2.0, 5.0]])
    mu = _point(0.0)
    psi_ok = _close(sinkhorn.half_step_psi(np.zeros(1), C, mu, 1.0), [2.0, 5.0])
    phi_ok = _close(sinkhorn.half_step_phi(np.zeros(1), C.T, mu, 1.0), [2.0, 5.0])
    return psi_ok and phi_ok


@check("sinkhorn", "solve: zero cost converges at once to the product coupling")
def _solve_zero() -> bool:
    mu, nu = _pair(), DiscreteMeasure.uniform([[0.0], [1.0], [2.0]])
    report = sinkhorn.solve(mu, nu, np.zeros((2, 3)), 1.0)
    return (
        report.converged
        and report.iterations == 1
        and _close(report.coupling.matrix, np.outer(mu.weights, nu.weights))
        and _close(report.potentials.sum_grid(), 0.0)
    )


@check("sinkhorn", "solve: Dirac marginals give f + g = c")
def _solve_dirac() -> bool:
    mu, nu = _point(1.0, 2.0), _point(3.0, 5.0)
    C = measures.build_cost(mu, nu)
    report = sinkhorn.solve(mu, nu, C, 0.5)
    return _close(report.coupling.matrix, [[1.0]]) and _close(report.potentials.sum_grid(), 13.0, 1e-9)


@check("sinkhorn", "coupling_from_potentials: zero data gives the product")
def _coupling_zero() -> bool:
    mu, nu = _pair(), _pair()
    pi = sinkhorn.coupling_from_potentials(Potentials([0, 0], [0, 0], 1.0), np.zeros((2, 2)), mu, nu)
    return _close(pi.matrix, 0.25)


@check("sinkhorn", "coupling_from_potentials: single atoms put mass 1 on the cell")
def _coupling_single() -> bool:
    mu, nu = _point(0.0), _point(2.0)
    pi = sinkhorn.coupling_from_potentials(Potentials([0.0], [4.0], 1.0), np.array([[4.0]]), mu, nu)
    return _close(pi.matrix, [[1.0]])


@check("sinkhorn", "iterate_marginals: odd steps reproduce mu, zero cost keeps mu_2 = mu")
def _iterate_marginals() -> bool:
    mu, nu = _pair(), DiscreteMeasure([[0.0], [1.0]], [0.3, 0.7])
    state = next(sinkhorn.sinkhorn_iterates(mu, nu, np.zeros((2, 2)), 1.0))
    mu_2, _ = sinkhorn.iterate_marginals(state)
    odd_rows = state.coupling(1).row_sums()
    return _close(mu_2.weights, mu.weights) and _close(odd_rows, mu.weights)


# diagnostics


@check("diagnostics", "normalize: f = 0 needs no shift")
def _normalize_zero() -> bool:
    return diagnostics.normalize(Potentials([0, 0], [0], 1.0), _pair()).shift == 0.0


@check("diagnostics", "normalize: f = 1 shifts by -1")
def _normalize_one() -> bool:
    return abs(diagnostics.normalize(Potentials([1, 1], [0], 1.0), _pair()).shift + 1.0) <= 1e-10


@check("diagnostics", "normalize: f = (0, 2) shifts by -1")
def _normalize_sym() -> bool:
    return abs(diagnostics.normalize(Potentials([0, 2], [0], 1.0), _pair()).shift + 1.0) <= 1e-10


@check("diagnostics", "schroedinger_residual: zero data has zero residual")
def _residual_zero() -> bool:
    r = diagnostics.schroedinger_residual(Potentials([0, 0], [0, 0], 1.0), np.zeros((2, 2)), _pair(), _pair())
    return r == (0.0, 0.0)


@check("diagnostics", "primal and dual values vanish on the product with zero cost")
def _values_zero() -> bool:
    mu = _pair()
    pi = sinkhorn.product_coupling(mu, mu)
    primal = diagnostics.primal_value(pi, np.zeros((2, 2)), mu, mu, 1.0)
    dual = diagnostics.dual_value(Potentials([0, 0], [0, 0], 1.0), mu, mu)
    return primal == 0.0 and dual == 0.0


@check("diagnostics", "primal and dual values equal c on single atoms")
def _values_single() -> bool:
    mu, nu = _point(0.0), _point(3.0)
    C = measures.build_cost(mu, nu)
    pi = Coupling([[1.0]], mu, nu)
    primal = diagnostics.primal_value(pi, C, mu, nu, 1.0)
    dual = diagnostics.dual_value(Potentials([0.0], [9.0], 1.0), mu, nu)
    return primal == 9.0 and dual == 9.0


@check("diagnostics", "condition_report: f = -1 has no positive part, mu_n = mu has no entropy")
def _conditions() -> bool:
    mu = _pair()
    report = diagnostics.condition_report(
        Potentials([-1, -1], [0, 0], 1.0), mu, mu, mu, mu, np.ones((2, 2)), [1.0], [1.5, 2.0]
    )
    return (
        report.f_plus_mean == 0.0
        and report.entropy_to_limit == 0.0
        and all(v == 0.0 for v in report.rn_tail_mu.values())
    )


# metrics


@check("metrics", "tv_distance: equal, shifted and disjoint measures")
def _tv() -> bool:
    p = _pair()
    q = DiscreteMeasure([[0.0], [1.0]], [0.7, 0.3])
    far = DiscreteMeasure([[5.0], [6.0]], [0.5, 0.5])
    return (
        metrics.tv_distance(p, p) == 0.0
        and abs(metrics.tv_distance(p, q) - 0.2) <= 1e-12
        and metrics.tv_distance(p, far) == 1.0
    )


@check("metrics", "tv_distance_couplings: equal, shifted and disjoint couplings")
def _tv_couplings() -> bool:
    p = _pair()
    far = DiscreteMeasure([[5.0], [6.0]], [0.5, 0.5])
    a = sinkhorn.product_coupling(p, p)
    b = Coupling([[0.35, 0.15], [0.15, 0.35]], p, p)
    c = sinkhorn.product_coupling(far, far)
    return (
        metrics.tv_distance_couplings(a, a) == 0.0
        and abs(metrics.tv_distance_couplings(a, b) - 0.2) <= 1e-12
        and metrics.tv_distance_couplings(a, c) == 1.0
    )


@check("metrics", "relative_entropy: zero on equal measures, inf off support")
def _kl() -> bool:
    p = _pair()
    q = DiscreteMeasure([[0.0], [2.0]], [0.5, 0.5])
    return metrics.relative_entropy(p, p) == 0.0 and math.isinf(metrics.relative_entropy(p, q))


@check("metrics", "ky_fan: equal vectors and a constant gap of 0.1")
def _ky_fan() -> bool:
    mu = _pair()
    f = np.array([0.3, -1.0])
    return metrics.ky_fan(f, f, mu) == 0.0 and abs(metrics.ky_fan(f + 0.1, f, mu) - 0.1) <= 1e-12


@check("metrics", "pushforward_kolmogorov: identical, shifted and reweighted laws")
def _kolmogorov() -> bool:
    mu = _pair()
    nu = DiscreteMeasure([[0.0], [1.0]], [0.6, 0.4])
    f = np.array([0.0, 1.0])
    point = _point(0.0)
    return (
        metrics.pushforward_kolmogorov(f, mu, f, mu) == 0.0
        and metrics.pushforward_kolmogorov(np.array([0.5]), point, np.array([0.0]), point) == 1.0
        and abs(metrics.pushforward_kolmogorov(f, mu, f, nu) - 0.1) <= 1e-12
    )


@check("metrics", "bounded_lipschitz: zero on equal couplings, at most delta under jitter")
def _bounded_lipschitz() -> bool:
    mu = DiscreteMeasure.uniform([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    a = sinkhorn.product_coupling(mu, mu)
    spec = PerturbationSpec(mode="support-jitter", schedule=[0.05], seed=11)
    moved = measures.perturb(mu, spec, 1)
    b = Coupling(a.matrix, moved, mu)
    return metrics.bounded_lipschitz(a, a) == 0.0 and metrics.bounded_lipschitz(a, b) <= 0.05


# oracle


@check("oracle", "brute_force_solve: zero cost gives the product, 1 x n is forced")
def _oracle_trivial() -> bool:
    mu = _pair()
    nu = DiscreteMeasure.uniform([[0.0], [1.0], [2.0]])
    product = oracle.brute_force_solve(mu, nu, np.zeros((2, 3)), 1.0)
    point = _point(0.0)
    forced = oracle.brute_force_solve(point, nu, measures.build_cost(point, nu), 0.1)
    return _close(product.matrix, np.outer(mu.weights, nu.weights)) and _close(
        forced.matrix[0], nu.weights
    )


@check("oracle", "potentials_from_coupling: product and single cell")
def _oracle_potentials() -> bool:
    mu = _pair()
    zero = oracle.potentials_from_coupling(sinkhorn.product_coupling(mu, mu), np.zeros((2, 2)), mu, mu, 1.0)
    a, b = _point(0.0), _point(2.0)
    single = oracle.potentials_from_coupling(Coupling([[1.0]], a, b), np.array([[4.0]]), a, b, 1.0)
    return _close(zero.sum_grid(), 0.0, 1e-10) and _close(single.sum_grid(), 4.0, 1e-10)


# harness


@check("harness", "stability_sweep: a zero schedule records zero distances")
def _sweep_zero() -> bool:
    cfg = harness.ExperimentConfig.model_validate(
        {
            "marginals": {
                "source": {"atoms": [[0.0], [1.0]], "weights": [0.5, 0.5]},
                "target": {"atoms": [[0.0], [2.0]], "weights": [0.25, 0.75]},
            },
            "epsilons": [1.0],
            "perturbation": {"mode": "weight-jitter", "schedule": [0.0]},
        }
    )
    trace = harness.stability_sweep(cfg)
    return len(trace) > 0 and all(row.value == 0.0 for row in trace.rows)


@check("harness", "sinkhorn_trace: zero cost gives zero columns from the first iterate")
def _trace_zero() -> bool:
    mu = _pair()
    trace = harness.sinkhorn_trace(
        mu, mu, np.zeros((2, 2)), 1.0, metrics=["entropy_sum", "tv_coupling", "tv_row_marginal", "tv_col_marginal"]
    )
    return len(trace) > 0 and all(abs(row.value) <= 1e-15 for row in trace.rows)


@check("harness", "emit_report: empty and single-row traces")
def _emit() -> bool:
    with tempfile.TemporaryDirectory() as tmp:
        empty = harness.ConvergenceTrace(kind="trace", metrics=["tv_coupling"])
        harness.emit_report(empty, "csv", Path(tmp) / "empty")
        lines = (Path(tmp) / "empty" / "trace.csv").read_text().splitlines()
        one = harness.ConvergenceTrace(
            kind="trace", metrics=["tv_coupling"], rows=[harness.TraceRow(1, "tv_coupling", 0.5, True)]
        )
        harness.emit_report(one, "csv", Path(tmp) / "one")
        rows = harness.load_trace(Path(tmp) / "one" / "trace.csv")
    return lines == [",".join(harness.TRACE_CSV_HEADER)] and rows == one.rows


def run_selftest() -> List[CheckOutcome]:
    """Run every registered check; exceptions count as failures."""
    outcomes = []
    for item in CHECKS:
        try:
            passed, detail = bool(item.fn()), ""
        except Exception as e:  # noqa: BLE001
            logger.debug("selftest %s raised", item.name, exc_info=True)
            passed, detail = False, f"{type(e).__name__}: {e}"
        outcomes.append(CheckOutcome(item.module, item.name, passed, detail))
    return outcomes
