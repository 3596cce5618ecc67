"""
Log-domain Sinkhorn iterations.

Potentials are kept in cost units: the coupling of a pair (f, g) is
``pi_ij = mu_i nu_j exp((f_i + g_j - c_ij) / eps)``. Every reduction over
atoms goes through ``scipy.special.logsumexp`` so nothing overflows for
small ``eps``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp, rel_entr

from .const import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    OVERFLOW_EXPONENT,
    POTENTIAL_UNITS,
    RESIDUAL_FACTOR,
    WEIGHT_SUM_TOL,
)
from .exceptions import CostError, MassDriftError, PotentialOverflowError
from .measures import CostMatrix, DiscreteMeasure

logger = logging.getLogger(__name__)

CostLike = Union[CostMatrix, np.ndarray]

TRACE_HEADER = ["iter", "marginal_tv", "entropy_sum", "dual_value"]


def cost_values(C: CostLike) -> np.ndarray:
    if isinstance(C, CostMatrix):
        return C.values
    return np.asarray(C, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Potentials:
    """Dual vectors f over X-atoms and g over Y-atoms, in cost units."""

    f: np.ndarray
    g: np.ndarray
    eps: float

    def __post_init__(self) -> None:
        f = np.array(self.f, dtype=np.float64).reshape(-1)
        g = np.array(self.g, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise ValueError("potentials must be finite")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps!r}")
        f.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "eps", float(self.eps))

    def shifted(self, a: float) -> "Potentials":
        """The equivalent pair (f + a, g - a)."""
        return Potentials(self.f + a, self.g - a, self.eps)

    def sum_grid(self) -> np.ndarray:
        """f ⊕ g as an m×n matrix."""
        return self.f[:, None] + self.g[None, :]

    def to_dict(self) -> dict:
        return {
            "f": self.f.tolist(),
            "g": self.g.tolist(),
            "eps": self.eps,
            "potential_units": POTENTIAL_UNITS,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Potentials":
        return cls(data["f"], data["g"], data["eps"])


@dataclass(frozen=True, eq=False)
class Coupling:
    """
    A nonnegative m×n matrix together with the two marginals it was built for.

    The constructor checks shape, finiteness and sign only; how closely the
    row and column sums match ``source`` and ``target`` depends on the
    producing operation and is reported by ``marginal_error``.
    """

    matrix: np.ndarray
    source: DiscreteMeasure
    target: DiscreteMeasure

    def __post_init__(self) -> None:
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.shape != (len(self.source), len(self.target)):
            raise ValueError(
                f"coupling shape {matrix.shape} does not match marginals "
                f"({len(self.source)}, {len(self.target)})"
            )
        if not np.all(np.isfinite(matrix)) or np.any(matrix < 0):
            raise ValueError("coupling entries must be finite and nonnegative")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape  # type: ignore[return-value]

    @property
    def mass(self) -> float:
        return float(self.matrix.sum())

    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def marginal_error(self) -> float:
        """max of the TV errors of the row sums against ``source`` and the column sums against ``target``."""
        row = 0.5 * float(np.abs(self.row_sums() - self.source.weights).sum())
        col = 0.5 * float(np.abs(self.col_sums() - self.target.weights).sum())
        return max(row, col)

    def cell_keys(self) -> List[tuple]:
        return [ki + kj for ki in self.source.keys for kj in self.target.keys]

    def cell_points(self) -> np.ndarray:
        """Points (x_i, y_j) of the product grid, row-major."""
        m, n = self.shape
        x = np.repeat(self.source.atoms, n, axis=0)
        y = np.tile(self.target.atoms, (m, 1))
        return np.hstack([x, y])

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
        }


def product_coupling(mu: DiscreteMeasure, nu: DiscreteMeasure) -> Coupling:
    return Coupling(np.outer(mu.weights, nu.weights), mu, nu)


def half_step_psi(phi: np.ndarray, C: CostLike, mu: DiscreteMeasure, eps: float) -> np.ndarray:
    """psi_j = -eps * log sum_i mu_i exp((phi_i - c_ij) / eps)."""
    c = cost_values(C)
    log_terms = np.log(mu.weights)[:, None] + (np.asarray(phi)[:, None] - c) / eps
    return -eps * logsumexp(log_terms, axis=0)


def half_step_phi(psi: np.ndarray, C: CostLike, nu: DiscreteMeasure, eps: float) -> np.ndarray:
    """phi_i = -eps * log sum_j nu_j exp((psi_j - c_ij) / eps)."""
    c = cost_values(C)
    log_terms = np.log(nu.weights)[None, :] + (np.asarray(psi)[None, :] - c) / eps
    return -eps * logsumexp(log_terms, axis=1)


def log_coupling(
    f: np.ndarray,
    g: np.ndarray,
    C: CostLike,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    eps: float,
) -> np.ndarray:
    c = cost_values(C)
    return (
        np.log(mu.weights)[:, None]
        + np.log(nu.weights)[None, :]
        + (np.asarray(f)[:, None] + np.asarray(g)[None, :] - c) / eps
    )


def _exponentiate(log_pi: np.ndarray) -> np.ndarray:
    if log_pi.size and log_pi.max() > OVERFLOW_EXPONENT:
        i, j = np.unravel_index(int(np.argmax(log_pi)), log_pi.shape)
        raise PotentialOverflowError(int(i), int(j), float(log_pi[i, j]))
    return np.exp(log_pi)


def coupling_from_potentials(
    p: Potentials, C: CostLike, mu: DiscreteMeasure, nu: DiscreteMeasure
) -> Coupling:
    """
    Primal coupling of a potential pair.

    Raises:
        PotentialOverflowError: if a log-space entry exceeds the overflow
            guard; the error names the offending cell.
    """
    log_pi = log_coupling(p.f, p.g, C, mu, nu, p.eps)
    return Coupling(_exponentiate(log_pi), mu, nu)


def initial_coupling(mu: DiscreteMeasure, nu: DiscreteMeasure, C: CostLike, eps: float) -> Coupling:
    """The Gibbs coupling proportional to exp(-c/eps) d(mu ⊗ nu) that Sinkhorn starts from."""
    zeros_f = np.zeros(len(mu))
    zeros_g = np.zeros(len(nu))
    log_pi = log_coupling(zeros_f, zeros_g, C, mu, nu, eps)
    log_pi -= logsumexp(log_pi)
    return Coupling(np.exp(log_pi), mu, nu)


def _check_shapes(mu: DiscreteMeasure, nu: DiscreteMeasure, C: CostLike) -> None:
    if isinstance(C, CostMatrix):
        C.check_support(mu, nu)
    elif cost_values(C).shape != (len(mu), len(nu)):
        raise CostError(
            f"cost shape {cost_values(C).shape} does not match marginals ({len(mu)}, {len(nu)})"
        )


@dataclass(frozen=True, eq=False)
class SinkhornState:
    """
    Dual iterates around step t >= 1: phi_t, psi_{t-1}, psi_t and phi_{t+1}.

    The primal iterates are pi_{2t-1} = pi(phi_t, psi_{t-1}) and
    pi_{2t} = pi(phi_t, psi_t).
    """

    t: int
    phi: np.ndarray
    psi_prev: np.ndarray
    psi: np.ndarray
    phi_next: np.ndarray
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    cost: np.ndarray = field(repr=False)
    eps: float

    def _check_index(self, n: int) -> None:
        if n not in (2 * self.t - 1, 2 * self.t):
            raise ValueError(f"state at t={self.t} holds iterates {2 * self.t - 1} and {2 * self.t}, not {n}")

    def coupling(self, n: int) -> Coupling:
        self._check_index(n)
        psi = self.psi_prev if n % 2 else self.psi
        log_pi = log_coupling(self.phi, psi, self.cost, self.mu, self.nu, self.eps)
        return Coupling(_exponentiate(log_pi), self.mu, self.nu)

    def iterate_potentials(self, n: int) -> Potentials:
        """Potentials of pi_n relative to its own marginals."""
        self._check_index(n)
        if n % 2:
            return Potentials(self.phi, self.psi, self.eps)
        return Potentials(self.phi_next, self.psi, self.eps)


def sinkhorn_iterates(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    C: CostLike,
    eps: float,
    init: Optional[Potentials] = None,
) -> Iterator[SinkhornState]:
    """Endless generator of Sinkhorn states for t = 1, 2, ... starting from phi_0 = 0."""
    _check_shapes(mu, nu, C)
    c = cost_values(C)
    phi = np.zeros(len(mu)) if init is None else np.array(init.f, dtype=np.float64)
    psi = half_step_psi(phi, c, mu, eps)
    phi = half_step_phi(psi, c, nu, eps)
    t = 1
    while True:
        psi_next = half_step_psi(phi, c, mu, eps)
        phi_next = half_step_phi(psi_next, c, nu, eps)
        yield SinkhornState(t, phi, psi, psi_next, phi_next, mu, nu, c, eps)
        phi, psi = phi_next, psi_next
        t += 1


def iterate_marginals(state: SinkhornState) -> Tuple[DiscreteMeasure, DiscreteMeasure]:
    """
    (mu_{2t}, nu_{2t-1}) from their densities exp((phi_t - phi_{t+1})/eps)
    against mu and exp((psi_{t-1} - psi_t)/eps) against nu.

    Raises:
        MassDriftError: if either density integrates to 1 only up to more
            than WEIGHT_SUM_TOL; the marginals are rescaled only below that.
    """
    if state.t < 1:
        raise ValueError("iterate marginals are defined for t >= 1")
    eps = state.eps
    row = state.mu.weights * np.exp((state.phi - state.phi_next) / eps)
    col = state.nu.weights * np.exp((state.psi_prev - state.psi) / eps)
    for side, weights in (("row", row), ("column", col)):
        drift = abs(float(weights.sum()) - 1.0)
        if drift > WEIGHT_SUM_TOL:
            raise MassDriftError(side, state.t, drift)
    return (
        DiscreteMeasure.normalized(state.mu.atoms, row),
        DiscreteMeasure.normalized(state.nu.atoms, col),
    )


def _entropy(weights: np.ndarray, reference: np.ndarray) -> float:
    return float(rel_entr(weights, reference).sum())


@dataclass(frozen=True, eq=False)
class SolveReport:
    potentials: Potentials
    coupling: Coupling
    iterations: int
    marginal_error_trace: np.ndarray
    entropy_trace: np.ndarray
    dual_trace: np.ndarray
    converged: bool
    tol: float

    @property
    def marginal_error(self) -> float:
        return float(self.marginal_error_trace[-1]) if self.iterations else float("inf")

    def trace_rows(self) -> List[list]:
        return [
            [k + 1, float(err), float(ent), float(dual)]
            for k, (err, ent, dual) in enumerate(
                zip(self.marginal_error_trace, self.entropy_trace, self.dual_trace)
            )
        ]

    def to_dict(self) -> dict:
        return {
            "potentials": self.potentials.to_dict(),
            "coupling": self.coupling.to_dict(),
            "iterations": self.iterations,
            "converged": self.converged,
            "tol": self.tol,
            "marginal_error_trace": self.marginal_error_trace.tolist(),
            "entropy_trace": self.entropy_trace.tolist(),
            "dual_trace": self.dual_trace.tolist(),
        }


def solve(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    C: CostLike,
    eps: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init: Optional[Potentials] = None,
) -> SolveReport:
    """
    Run Sinkhorn from phi_0 = 0 (or ``init.f``) until the coupling's marginals
    are within ``tol`` in total variation.

    Each full iteration computes psi_t then phi_{t+1} and assembles
    pi(phi_{t+1}, psi_t), whose X-marginal is mu up to rounding, so the error
    is carried by the Y-marginal. A run only counts as converged when the
    Y-side Schrödinger equation also holds to ``10 * tol`` in eps units.

    Returns:
        SolveReport; ``converged`` is False when ``max_iter`` is reached.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    _check_shapes(mu, nu, C)
    c = cost_values(C)

    phi = np.zeros(len(mu)) if init is None else np.array(init.f, dtype=np.float64)
    psi = np.zeros(len(nu))
    log_pi = None
    errors: List[float] = []
    entropies: List[float] = []
    duals: List[float] = []
    converged = False

    for _ in range(max_iter):
        psi = half_step_psi(phi, c, mu, eps)
        phi = half_step_phi(psi, c, nu, eps)
        log_pi = log_coupling(phi, psi, c, mu, nu, eps)
        row = np.exp(logsumexp(log_pi, axis=1))
        log_col = logsumexp(log_pi, axis=0)
        col = np.exp(log_col)

        err = max(
            0.5 * float(np.abs(row - mu.weights).sum()),
            0.5 * float(np.abs(col - nu.weights).sum()),
        )
        errors.append(err)
        entropies.append(
            _entropy(row / row.sum(), mu.weights) + _entropy(col / col.sum(), nu.weights)
        )
        duals.append(mu.mean(phi) + nu.mean(psi))

        residual = float(np.abs(log_col - np.log(nu.weights)).max())
        if err <= tol and residual <= RESIDUAL_FACTOR * tol:
            converged = True
            break

    iterations = len(errors)
    if converged:
        logger.info("sinkhorn converged after %d iterations (error %.3e)", iterations, errors[-1])
    else:
        logger.warning(
            "sinkhorn stopped at max_iter=%d with marginal error %.3e > tol %.1e",
            max_iter,
            errors[-1],
            tol,
        )

    return SolveReport(
        potentials=Potentials(phi, psi, eps),
        coupling=Coupling(_exponentiate(log_pi), mu, nu),
        iterations=iterations,
        marginal_error_trace=np.asarray(errors),
        entropy_trace=np.asarray(entropies),
        dual_trace=np.asarray(duals),
        converged=converged,
        tol=tol,
    )
