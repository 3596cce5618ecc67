"""
Brute-force entropic OT on tiny instances.

The transport polytope is explored along loop directions
``E = e_ij - e_is - e_rj + e_rs`` that keep both marginals fixed, starting
from the interior point mu ⊗ nu. Each line search is a golden-section
search, so nothing here shares the fixed-point structure of Sinkhorn.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .const import ORACLE_MAX_CELLS, ORACLE_MAX_SWEEPS
from .diagnostics import dual_value, normalize, primal_value, schroedinger_residual
from .exceptions import OracleSizeError, SeparabilityError
from .measures import CostMatrix, DiscreteMeasure, build_cost
from .metrics import tv_distance_couplings
from .sinkhorn import CostLike, Coupling, Potentials, cost_values, solve

logger = logging.getLogger(__name__)

INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

Loop = Tuple[int, int, int, int]


def golden_section(fn, lo: float, hi: float, max_iter: int = 200) -> float:
    """
    Minimize a unimodal ``fn`` on the open interval (lo, hi).

    The search runs until the two probe points meet at float resolution or
    ``max_iter`` reductions were made; only interior points are evaluated.
    """
    x1 = hi - INV_GOLDEN * (hi - lo)
    x2 = lo + INV_GOLDEN * (hi - lo)
    f1, f2 = fn(x1), fn(x2)
    for _ in range(max_iter):
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - INV_GOLDEN * (hi - lo)
            f1 = fn(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + INV_GOLDEN * (hi - lo)
            f2 = fn(x2)
        if not lo < x1 < x2 < hi:
            break
    return x1 if f1 <= f2 else x2


@dataclass(frozen=True)
class PolytopeParam:
    """
    Loop coordinates of the transport polytope around a reference coupling.

    ``basis`` lists the (m-1)(n-1) loops (i, j, r, s) pivoting on the last
    row and column; moving along any of them keeps the marginals exact.
    """

    shape: Tuple[int, int]
    basis: Tuple[Loop, ...]

    @classmethod
    def standard(cls, m: int, n: int) -> "PolytopeParam":
        basis = tuple((i, j, m - 1, n - 1) for i in range(m - 1) for j in range(n - 1))
        return cls((m, n), basis)

    @property
    def dimension(self) -> int:
        return len(self.basis)

    @staticmethod
    def bounds(P: np.ndarray, loop: Loop) -> Tuple[float, float]:
        """Open interval of steps t keeping P + t·E strictly positive."""
        i, j, r, s = loop
        lo = max(-P[i, j], -P[r, s])
        hi = min(P[i, s], P[r, j])
        return float(lo), float(hi)

    def all_loops(self) -> Iterator[Loop]:
        m, n = self.shape
        for i, r in itertools.combinations(range(m), 2):
            for j, s in itertools.combinations(range(n), 2):
                yield (i, j, r, s)


def _loop_cost(c: np.ndarray, loop: Loop) -> float:
    i, j, r, s = loop
    return float(c[i, j] - c[i, s] - c[r, j] + c[r, s])


def _loop_derivative(P: np.ndarray, cycle_cost: float, eps: float, loop: Loop, t: float) -> float:
    # the mu ⊗ nu factors of the four cells cancel around a loop
    i, j, r, s = loop
    a, b = P[i, j] + t, P[r, s] + t
    c, d = P[i, s] - t, P[r, j] - t
    if a <= 0 or b <= 0 or c <= 0 or d <= 0:
        return math.inf
    return cycle_cost + eps * (math.log(a) + math.log(b) - math.log(c) - math.log(d))


def _loop_curvature(P: np.ndarray, eps: float, loop: Loop) -> float:
    i, j, r, s = loop
    return eps * (1.0 / P[i, j] + 1.0 / P[r, s] + 1.0 / P[i, s] + 1.0 / P[r, j])


def _line_search(P: np.ndarray, c: np.ndarray, eps: float, loop: Loop) -> float:
    lo, hi = PolytopeParam.bounds(P, loop)
    if not lo < hi:
        return 0.0
    cycle_cost = _loop_cost(c, loop)
    t = golden_section(lambda x: abs(_loop_derivative(P, cycle_cost, eps, loop, x)), lo, hi)
    if abs(_loop_derivative(P, cycle_cost, eps, loop, t)) >= abs(
        _loop_derivative(P, cycle_cost, eps, loop, 0.0)
    ):
        return 0.0
    i, j, r, s = loop
    P[i, j] += t
    P[r, s] += t
    P[i, s] -= t
    P[r, j] -= t
    return t


def _greedy_loop(P: np.ndarray, i: int, j: int) -> Optional[Loop]:
    # pivot on the cell whose loop keeps the largest minimum mass
    m, n = P.shape
    best, best_mass = None, -1.0
    for r in range(m):
        if r == i:
            continue
        for s in range(n):
            if s == j:
                continue
            mass = min(P[i, s], P[r, j], P[r, s])
            if mass > best_mass:
                best, best_mass = (i, j, r, s), mass
    return best


def _basis_matrix(param: PolytopeParam) -> np.ndarray:
    m, n = param.shape
    B = np.zeros((param.dimension, m * n))
    for k, (i, j, r, s) in enumerate(param.basis):
        B[k, i * n + j] += 1.0
        B[k, r * n + s] += 1.0
        B[k, i * n + s] -= 1.0
        B[k, r * n + j] -= 1.0
    return B


def _loop_gradient(P: np.ndarray, c: np.ndarray, eps: float, B: np.ndarray) -> np.ndarray:
    # log(mu_i nu_j) and the constant of the entropy cancel around every loop
    return B @ (c + eps * np.log(P)).reshape(-1)


def _newton_polish(
    P: np.ndarray,
    c: np.ndarray,
    eps: float,
    param: PolytopeParam,
    max_iter: int = 50,
    rho: float = 0.5,
) -> np.ndarray:
    """
    Damped Newton steps in loop coordinates until the loop derivatives stop
    shrinking. Steps are halved until the coupling stays positive and the
    largest loop derivative decreases.
    """
    B = _basis_matrix(param)
    grad = _loop_gradient(P, c, eps, B)
    for _ in range(max_iter):
        size = float(np.abs(grad).max())
        if size == 0.0:
            break
        hessian = eps * (B / P.reshape(-1)) @ B.T
        direction = (B.T @ np.linalg.solve(hessian, -grad)).reshape(P.shape)
        alpha = 1.0
        for _ in range(60):
            candidate = P + alpha * direction
            if np.all(candidate > 0):
                new_grad = _loop_gradient(candidate, c, eps, B)
                if float(np.abs(new_grad).max()) < size:
                    break
            alpha *= rho
        else:
            break
        P, grad = candidate, new_grad
    return P


def objective(pi: Coupling, C: CostLike, mu: DiscreteMeasure, nu: DiscreteMeasure, eps: float) -> float:
    """<c, pi> + eps * H(pi | mu ⊗ nu)."""
    return primal_value(pi, C, mu, nu, eps)


def projected_derivatives(pi: Coupling, C: CostLike, eps: float) -> np.ndarray:
    """Directional derivatives of the objective along the standard loop basis."""
    c = cost_values(C)
    P = pi.matrix
    param = PolytopeParam.standard(*P.shape)
    return np.array(
        [_loop_derivative(P, _loop_cost(c, loop), eps, loop, 0.0) for loop in param.basis]
    )


def brute_force_solve(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    C: CostLike,
    eps: float,
    tol: float = 1e-10,
    max_sweeps: int = ORACLE_MAX_SWEEPS,
) -> Coupling:
    """
    Minimize <c, pi> + eps H(pi | mu ⊗ nu) over the transport polytope by
    cyclic coordinate descent on loop coordinates.

    Descent stops once every basis loop's Newton step |F'| / F'' is below
    ``tol``; a few damped Newton steps over the whole loop basis then drive
    the loop derivatives down to rounding level.

    Raises:
        OracleSizeError: if m * n exceeds the desk-scale cap.
    """
    m, n = len(mu), len(nu)
    if m * n > ORACLE_MAX_CELLS:
        raise OracleSizeError(f"oracle handles at most {ORACLE_MAX_CELLS} cells, got {m}x{n}")
    c = cost_values(C)
    if c.shape != (m, n):
        raise OracleSizeError(f"cost shape {c.shape} does not match ({m}, {n})")

    P = np.outer(mu.weights, nu.weights)
    param = PolytopeParam.standard(m, n)
    if param.dimension == 0:
        return Coupling(P, mu, nu)

    free_cells = [(i, j) for i in range(m) for j in range(n)]
    for sweep in range(1, max_sweeps + 1):
        moved = 0.0
        for loop in param.basis:
            moved = max(moved, abs(_line_search(P, c, eps, loop)))
        for i, j in free_cells:
            loop = _greedy_loop(P, i, j)
            if loop is not None:
                moved = max(moved, abs(_line_search(P, c, eps, loop)))

        step = max(
            abs(_loop_derivative(P, _loop_cost(c, loop), eps, loop, 0.0)) / _loop_curvature(P, eps, loop)
            for loop in param.basis
        )
        if step <= tol:
            logger.debug("oracle converged after %d sweeps (newton step %.3e)", sweep, step)
            break
        if moved == 0.0:
            logger.debug("oracle stagnated after %d sweeps (newton step %.3e)", sweep, step)
            break
    else:
        logger.warning("oracle stopped after %d sweeps (newton step %.3e)", max_sweeps, step)

    P = _newton_polish(P, c, eps, param)
    return Coupling(P, mu, nu)


def optimality_certificate(
    pi: Coupling,
    C: CostLike,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    eps: float,
    step: float = 1e-4,
) -> float:
    """
    Smallest objective change among feasible moves ±step along every loop.

    A nonnegative result (up to rounding) certifies that no loop direction
    decreases the objective.
    """
    base = objective(pi, C, mu, nu, eps)
    param = PolytopeParam.standard(*pi.shape)
    worst = math.inf
    for loop in param.all_loops():
        lo, hi = PolytopeParam.bounds(pi.matrix, loop)
        for t in (step, -step):
            if not lo < t < hi:
                continue
            P = np.array(pi.matrix)
            i, j, r, s = loop
            P[i, j] += t
            P[r, s] += t
            P[i, s] -= t
            P[r, j] -= t
            worst = min(worst, objective(Coupling(P, mu, nu), C, mu, nu, eps) - base)
    return worst


def potentials_from_coupling(
    pi: Coupling,
    C: CostLike,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    eps: float,
    threshold: float = 1e-6,
) -> Potentials:
    """
    Split the log-density eps·log(pi/(mu ⊗ nu)) + c into f ⊕ g by weighted
    least squares, then normalize at alpha = 0.

    Raises:
        SeparabilityError: if pi has empty cells, or if the coupling rebuilt
            from the recovered potentials differs from ``pi`` by more than
            ``threshold`` in some cell.
    """
    c = cost_values(C)
    P = pi.matrix
    if np.any(P <= 0):
        raise SeparabilityError(math.inf, threshold)
    m, n = P.shape
    reference = np.outer(mu.weights, nu.weights)
    target = eps * np.log(P / reference) + c

    design = np.zeros((m * n, m + n))
    rows = np.arange(m * n)
    design[rows, rows // n] = 1.0
    design[rows, m + rows % n] = 1.0
    sqrt_w = np.sqrt(P.reshape(-1))
    solution, *_ = np.linalg.lstsq(design * sqrt_w[:, None], target.reshape(-1) * sqrt_w, rcond=None)

    p = Potentials(solution[:m], solution[m:], eps)
    rebuilt = reference * np.exp((p.sum_grid() - c) / eps)
    residual = float(np.abs(rebuilt - P).max())
    if residual > threshold:
        raise SeparabilityError(residual, threshold)
    return normalize(p, mu, 0.0).potentials


@dataclass(frozen=True, eq=False)
class OracleInstance:
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    cost: CostMatrix
    eps: float


def random_instance(
    rng: np.random.Generator,
    sizes: Sequence[int] = (2, 3, 4, 5),
    epsilons: Sequence[float] = (0.1, 1.0),
    d: int = 2,
) -> OracleInstance:
    """Random positive weights on random atoms in [0, 1]^d with quadratic cost."""
    m, n = (int(k) for k in rng.choice(sizes, size=2))
    mu = DiscreteMeasure.normalized(rng.uniform(0.0, 1.0, (m, d)), rng.uniform(0.1, 1.0, m))
    nu = DiscreteMeasure.normalized(rng.uniform(0.0, 1.0, (n, d)), rng.uniform(0.1, 1.0, n))
    eps = float(rng.choice(epsilons))
    return OracleInstance(mu, nu, build_cost(mu, nu), eps)


@dataclass(frozen=True)
class OracleCheckResult:
    index: int
    shape: Tuple[int, int]
    eps: float
    tv: float
    duality_gap: float
    oracle_residual: float
    converged: bool
    passed: bool

    def line(self) -> str:
        m, n = self.shape
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} instance={self.index} shape={m}x{n} eps={self.eps:g} "
            f"tv={self.tv:.3e} gap={self.duality_gap:.3e} residual={self.oracle_residual:.3e}"
        )


def check_instance(index: int, instance: OracleInstance, tol: float = 1e-10) -> OracleCheckResult:
    """Compare Sinkhorn and the oracle on one instance."""
    mu, nu, C, eps = instance.mu, instance.nu, instance.cost, instance.eps
    report = solve(mu, nu, C, eps, tol=tol)
    oracle_pi = brute_force_solve(mu, nu, C, eps, tol=tol)

    tv = tv_distance_couplings(report.coupling, oracle_pi)
    dual = dual_value(report.potentials, mu, nu)
    gap = abs(primal_value(report.coupling, C, mu, nu, eps) - dual)
    try:
        oracle_p = potentials_from_coupling(oracle_pi, C, mu, nu, eps)
        residual = max(schroedinger_residual(oracle_p, C, mu, nu))
    except SeparabilityError as e:
        logger.warning("instance %d: %s", index, e)
        residual = math.inf

    passed = (
        report.converged
        and tv <= 1e-6
        and gap <= 1e-8 * (1.0 + abs(dual))
        and residual <= 1e-8
    )
    return OracleCheckResult(index, (len(mu), len(nu)), eps, tv, gap, residual, report.converged, passed)


def oracle_check(seed: int, instances: int = 20, tol: float = 1e-10) -> List[OracleCheckResult]:
    """Run Sinkhorn against the oracle on ``instances`` random instances drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    results = []
    for index in range(1, instances + 1):
        result = check_instance(index, random_instance(rng), tol)
        logger.info(result.line())
        results.append(result)
    return results
