"""
Optimality structure of entropic OT: potential normalization, Schrödinger
residuals, primal and dual values, and the integrability quantities behind
the stability results.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Optional, Tuple, Union

import numpy as np
from scipy.optimize import bisect
from scipy.special import logsumexp, rel_entr

from .const import INF, POTENTIAL_UNITS
from .exceptions import NormalizationError
from .measures import DiscreteMeasure, same_support
from .metrics import relative_entropy
from .sinkhorn import (
    CostLike,
    Coupling,
    Potentials,
    cost_values,
    half_step_phi,
    half_step_psi,
)

logger = logging.getLogger(__name__)

_MAX_LOG = math.log(np.finfo(np.float64).max)
_MAX_EXPANSIONS = 200


@dataclass(frozen=True, eq=False)
class NormalizedPotentials:
    """Potentials shifted so that sum_i mu_i arctan(f_i) equals ``alpha``."""

    potentials: Potentials
    alpha: float
    shift: float = 0.0

    @property
    def f(self) -> np.ndarray:
        return self.potentials.f

    @property
    def g(self) -> np.ndarray:
        return self.potentials.g

    @property
    def eps(self) -> float:
        return self.potentials.eps

    def to_dict(self) -> dict:
        return {**self.potentials.to_dict(), "alpha": self.alpha, "shift": self.shift}


def _unwrap(p: Union[Potentials, NormalizedPotentials]) -> Potentials:
    return p.potentials if isinstance(p, NormalizedPotentials) else p


def arctan_mean(f: np.ndarray, mu: DiscreteMeasure) -> float:
    return float(np.dot(mu.weights, np.arctan(f)))


def normalize(
    p: Union[Potentials, NormalizedPotentials], mu: DiscreteMeasure, alpha: float = 0.0
) -> NormalizedPotentials:
    """
    Select the representative (f + a, g - a) with sum_i mu_i arctan(f_i + a) = alpha.

    The map a -> sum_i mu_i arctan(f_i + a) is strictly increasing onto
    (-pi/2, pi/2), so the shift is unique; it is found by geometric bracket
    expansion followed by bisection.

    Raises:
        NormalizationError: if ``alpha`` lies outside (-pi/2, pi/2).
    """
    p = _unwrap(p)
    if not -math.pi / 2 < alpha < math.pi / 2:
        raise NormalizationError(f"alpha={alpha!r} is outside (-pi/2, pi/2)")
    f = p.f

    def h(a: float) -> float:
        return arctan_mean(f + a, mu) - alpha

    if h(0.0) == 0.0:
        return NormalizedPotentials(p, alpha, 0.0)

    spread = math.tan(min(abs(alpha) + 0.1, math.pi / 2 - 1e-9))
    lo = -(float(f.max()) + spread)
    hi = -(float(f.min()) - spread)
    width = max(hi - lo, 1.0)
    for _ in range(_MAX_EXPANSIONS):
        if h(lo) <= 0.0:
            break
        lo -= width
        width *= 2.0
    else:
        raise NormalizationError("could not bracket the normalization shift from below")
    width = max(hi - lo, 1.0)
    for _ in range(_MAX_EXPANSIONS):
        if h(hi) >= 0.0:
            break
        hi += width
        width *= 2.0
    else:
        raise NormalizationError("could not bracket the normalization shift from above")

    if h(lo) == 0.0:
        a = lo
    elif h(hi) == 0.0:
        a = hi
    else:
        a = bisect(h, lo, hi, xtol=1e-14, maxiter=400, disp=False)
    logger.debug("normalize: alpha=%g shift=%.17g", alpha, a)
    return NormalizedPotentials(p.shifted(a), alpha, float(a))


def schroedinger_residual(
    p: Union[Potentials, NormalizedPotentials],
    C: CostLike,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    relative: bool = False,
) -> Tuple[float, float]:
    """
    Sup-norm violations of the two Schrödinger equations, in cost units.

    With ``relative=True`` both residuals are divided by eps.
    """
    p = _unwrap(p)
    r_f = float(np.abs(p.f - half_step_phi(p.g, C, nu, p.eps)).max())
    r_g = float(np.abs(p.g - half_step_psi(p.f, C, mu, p.eps)).max())
    if relative:
        return r_f / p.eps, r_g / p.eps
    return r_f, r_g


def primal_value(
    pi: Coupling,
    C: CostLike,
    mu: Optional[DiscreteMeasure] = None,
    nu: Optional[DiscreteMeasure] = None,
    eps: float = 1.0,
) -> float:
    """<c, pi> + eps * H(pi | mu ⊗ nu), with 0 log 0 = 0."""
    mu = pi.source if mu is None else mu
    nu = pi.target if nu is None else nu
    c = cost_values(C)
    reference = np.outer(mu.weights, nu.weights)
    transport = float(np.sum(c * pi.matrix))
    entropy = float(rel_entr(pi.matrix, reference).sum())
    return transport + eps * entropy


def dual_value(
    p: Union[Potentials, NormalizedPotentials], mu: DiscreteMeasure, nu: DiscreteMeasure
) -> float:
    """sum_i mu_i f_i + sum_j nu_j g_j, in cost units."""
    p = _unwrap(p)
    return mu.mean(p.f) + nu.mean(p.g)


def extend_potential(
    p: Union[Potentials, NormalizedPotentials],
    C_new: CostLike,
    measure: DiscreteMeasure,
    side: Literal["f", "g"] = "f",
) -> np.ndarray:
    """
    Evaluate a potential at new points through its Schrödinger equation.

    For ``side="f"``, ``C_new`` has one row per new X-point and one column per
    atom of ``measure`` (the Y-marginal carrying g). For ``side="g"`` the
    roles are transposed: rows are atoms of ``measure`` (the X-marginal),
    columns are new Y-points.
    """
    p = _unwrap(p)
    if side == "f":
        return half_step_phi(p.g, C_new, measure, p.eps)
    if side == "g":
        return half_step_psi(p.f, C_new, measure, p.eps)
    raise ValueError(f"side must be 'f' or 'g', got {side!r}")


def _log_mean_exp(log_values: np.ndarray, weights: np.ndarray) -> float:
    log_total = float(logsumexp(log_values + np.log(weights)))
    if log_total > _MAX_LOG:
        return INF
    return math.exp(log_total)


def exp_moment(C: CostLike, mu: DiscreteMeasure, nu: DiscreteMeasure, beta: float) -> float:
    """∫ exp(beta * c) d(mu ⊗ nu), or inf when it overflows."""
    c = cost_values(C)
    return _log_mean_exp((beta * c).reshape(-1), np.outer(mu.weights, nu.weights).reshape(-1))


def rn_tail(limit: DiscreteMeasure, current: DiscreteMeasure, level: float) -> float:
    """limit(d limit / d current >= level) on a shared support, else inf."""
    if not same_support(limit, current):
        return INF
    ratio = limit.weights / current.weights
    return float(limit.weights[ratio >= level].sum())


def positive_tail(values: np.ndarray, measure: DiscreteMeasure, level: float) -> float:
    """∫ v 1{v > level} d measure."""
    mask = values > level
    return float(np.dot(measure.weights[mask], values[mask]))


def _level_key(value: float) -> str:
    return f"{value:g}"


@dataclass(frozen=True)
class ConditionReport:
    """Integrability and entropy quantities at one perturbation index."""

    f_plus_mean: float
    g_plus_mean: float
    f_abs_mean: float
    g_abs_mean: float
    f_mean: float
    g_mean: float
    cost_mean: float
    entropy_to_limit: float
    f_tail: Dict[str, float] = field(default_factory=dict)
    g_tail: Dict[str, float] = field(default_factory=dict)
    exp_moment: Dict[str, float] = field(default_factory=dict)
    potential_exp_moment_f: Dict[str, float] = field(default_factory=dict)
    potential_exp_moment_g: Dict[str, float] = field(default_factory=dict)
    rn_tail_mu: Dict[str, float] = field(default_factory=dict)
    rn_tail_nu: Dict[str, float] = field(default_factory=dict)

    def rows(self) -> List[Tuple[str, float]]:
        """Flat (quantity, value) pairs in a fixed order."""
        out: List[Tuple[str, float]] = [
            ("f_plus_mean", self.f_plus_mean),
            ("g_plus_mean", self.g_plus_mean),
            ("f_abs_mean", self.f_abs_mean),
            ("g_abs_mean", self.g_abs_mean),
            ("f_mean", self.f_mean),
            ("g_mean", self.g_mean),
            ("cost_mean", self.cost_mean),
            ("entropy_to_limit", self.entropy_to_limit),
        ]
        for name in (
            "f_tail",
            "g_tail",
            "rn_tail_mu",
            "rn_tail_nu",
        ):
            for level, value in getattr(self, name).items():
                out.append((f"{name}@C={level}", value))
        for name in ("exp_moment", "potential_exp_moment_f", "potential_exp_moment_g"):
            for beta, value in getattr(self, name).items():
                out.append((f"{name}@beta={beta}", value))
        return out

    def to_dict(self) -> dict:
        return {name: value for name, value in self.rows()} | {"potential_units": POTENTIAL_UNITS}


def condition_report(
    p: Union[Potentials, NormalizedPotentials],
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    mu_limit: DiscreteMeasure,
    nu_limit: DiscreteMeasure,
    C: CostLike,
    betas: Iterable[float] = (),
    tail_levels: Iterable[float] = (),
) -> ConditionReport:
    """
    Evaluate every hypothesis quantity for the potentials of (mu, nu).

    Entropy and Radon-Nikodym entries are ``inf`` when the current marginals
    do not sit on the atoms of the limit marginals.
    """
    p = _unwrap(p)
    c = cost_values(C)
    betas = list(betas)
    tail_levels = list(tail_levels)
    f, g = p.f, p.g

    if same_support(mu, mu_limit) and same_support(nu, nu_limit):
        entropy = relative_entropy(mu, mu_limit) + relative_entropy(nu, nu_limit)
    else:
        entropy = INF

    return ConditionReport(
        f_plus_mean=mu.mean(np.maximum(f, 0.0)),
        g_plus_mean=nu.mean(np.maximum(g, 0.0)),
        f_abs_mean=mu.mean(np.abs(f)),
        g_abs_mean=nu.mean(np.abs(g)),
        f_mean=mu.mean(f),
        g_mean=nu.mean(g),
        cost_mean=float(mu.weights @ c @ nu.weights),
        entropy_to_limit=entropy,
        f_tail={_level_key(C_): positive_tail(f, mu, C_) for C_ in tail_levels},
        g_tail={_level_key(C_): positive_tail(g, nu, C_) for C_ in tail_levels},
        exp_moment={_level_key(b): exp_moment(c, mu, nu, b) for b in betas},
        potential_exp_moment_f={
            _level_key(b): _log_mean_exp(b * f / p.eps, mu.weights) for b in betas
        },
        potential_exp_moment_g={
            _level_key(b): _log_mean_exp(b * g / p.eps, nu.weights) for b in betas
        },
        rn_tail_mu={_level_key(C_): rn_tail(mu_limit, mu, C_) for C_ in tail_levels},
        rn_tail_nu={_level_key(C_): rn_tail(nu_limit, nu, C_) for C_ in tail_levels},
    )
