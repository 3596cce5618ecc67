"""Distances between measures, couplings, potentials and pushforward laws."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.optimize import bisect
from scipy.special import rel_entr

from .const import BL_DICTIONARY_VERSION, INF
from .measures import DiscreteMeasure, same_support
from .sinkhorn import Coupling, Potentials


@dataclass(frozen=True)
class MetricValue:
    """One named distance; +inf marks an inapplicable comparison."""

    name: str
    value: float

    def __post_init__(self) -> None:
        if math.isnan(self.value) or self.value < 0:
            raise ValueError(f"metric {self.name} must be nonnegative, got {self.value!r}")

    @property
    def applicable(self) -> bool:
        return not math.isinf(self.value)


def _keyed(keys: Sequence[tuple], weights: np.ndarray) -> Dict[tuple, float]:
    return dict(zip(keys, weights.tolist()))


def _half_l1(pa: Dict[tuple, float], pb: Dict[tuple, float]) -> float:
    total = 0.0
    for key in set(pa) | set(pb):
        total += abs(pa.get(key, 0.0) - pb.get(key, 0.0))
    return 0.5 * total


def _clip_unit(value: float) -> float:
    return min(1.0, max(0.0, value))


def tv_distance(p: DiscreteMeasure, q: DiscreteMeasure) -> float:
    """Total variation distance; atoms are matched by canonical coordinates."""
    if same_support(p, q):
        return _clip_unit(0.5 * float(np.abs(p.weights - q.weights).sum()))
    return _clip_unit(_half_l1(_keyed(p.keys, p.weights), _keyed(q.keys, q.weights)))


def tv_distance_couplings(a: Coupling, b: Coupling) -> float:
    """Total variation distance on the union of the two product grids."""
    if same_support(a.source, b.source) and same_support(a.target, b.target):
        return _clip_unit(0.5 * float(np.abs(a.matrix - b.matrix).sum()))
    return _clip_unit(
        _half_l1(
            _keyed(a.cell_keys(), a.matrix.reshape(-1)),
            _keyed(b.cell_keys(), b.matrix.reshape(-1)),
        )
    )


def relative_entropy(
    p: Union[DiscreteMeasure, Coupling], q: Union[DiscreteMeasure, Coupling]
) -> float:
    """
    H(p|q) = sum p log(p/q) with 0 log 0 = 0.

    Returns ``inf`` when some atom (or cell) of p carries no q-mass.
    """
    if isinstance(p, Coupling) and isinstance(q, Coupling):
        aligned = same_support(p.source, q.source) and same_support(p.target, q.target)
        pw, qw = p.matrix.reshape(-1), q.matrix.reshape(-1)
        pk, qk = (None, None) if aligned else (p.cell_keys(), q.cell_keys())
    elif isinstance(p, DiscreteMeasure) and isinstance(q, DiscreteMeasure):
        aligned = same_support(p, q)
        pw, qw = p.weights, q.weights
        pk, qk = (None, None) if aligned else (p.keys, q.keys)
    else:
        raise TypeError("relative_entropy compares two measures or two couplings")

    if not aligned:
        q_mass = _keyed(qk, qw)
        p_mass = _keyed(pk, pw)
        if any(w > 0 and q_mass.get(k, 0.0) <= 0 for k, w in p_mass.items()):
            return INF
        pw = np.array(list(p_mass.values()))
        qw = np.array([q_mass[k] for k in p_mass])
    return max(0.0, float(rel_entr(pw, qw).sum()))


def _ky_fan_scan(delta: np.ndarray, weights: np.ndarray) -> float:
    # G(t) = mass(|delta| > t) is constant on [b_j, b_{j+1}); the first
    # interval where G(t) <= t becomes reachable holds the infimum.
    levels = np.unique(np.concatenate([[0.0], delta]))
    for j, b in enumerate(levels):
        tail = float(weights[delta > b].sum())
        candidate = max(float(b), tail)
        upper = levels[j + 1] if j + 1 < len(levels) else INF
        if candidate < upper:
            return candidate
    return float(levels[-1])


def ky_fan(
    f_n: np.ndarray,
    f: np.ndarray,
    mu: DiscreteMeasure,
    support: Optional[DiscreteMeasure] = None,
) -> float:
    """
    Ky Fan distance inf{t > 0 : mu(|f_n - f| > t) <= t}.

    ``f_n`` and ``f`` must live on the atoms of ``mu``. When ``support`` is
    given and sits on other atoms, or the lengths disagree, the comparison is
    inapplicable and ``inf`` is returned.
    """
    f_n = np.asarray(f_n, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if support is not None and not same_support(support, mu):
        return INF
    if f_n.shape != f.shape or f.shape[0] != len(mu):
        return INF
    return _ky_fan_scan(np.abs(f_n - f), mu.weights)


def ky_fan_sum(
    p_n: Potentials,
    p: Potentials,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    support: Optional[tuple[DiscreteMeasure, DiscreteMeasure]] = None,
) -> float:
    """Ky Fan distance of f_n ⊕ g_n to f ⊕ g under mu ⊗ nu."""
    if support is not None and not (
        same_support(support[0], mu) and same_support(support[1], nu)
    ):
        return INF
    if p_n.f.shape != p.f.shape or p_n.g.shape != p.g.shape:
        return INF
    delta = np.abs(p_n.sum_grid() - p.sum_grid()).reshape(-1)
    return _ky_fan_scan(delta, np.outer(mu.weights, nu.weights).reshape(-1))


def pushforward_kolmogorov(
    f_n: np.ndarray, mu_n: DiscreteMeasure, f: np.ndarray, mu: DiscreteMeasure
) -> float:
    """Kolmogorov distance between the laws (f_n)#mu_n and f#mu on the real line."""
    a = np.asarray(f_n, dtype=np.float64)
    b = np.asarray(f, dtype=np.float64)
    grid = np.union1d(a, b)
    return _clip_unit(float(np.abs(_cdf(a, mu_n.weights, grid) - _cdf(b, mu.weights, grid)).max()))


def _cdf(values: np.ndarray, weights: np.ndarray, grid: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    cumulative = np.concatenate([[0.0], np.cumsum(weights[order])])
    return cumulative[np.searchsorted(sorted_values, grid, side="right")]


def pushforward_levy(
    f_n: np.ndarray, mu_n: DiscreteMeasure, f: np.ndarray, mu: DiscreteMeasure
) -> float:
    """
    Lévy distance between (f_n)#mu_n and f#mu.

    Unlike the Kolmogorov distance it shrinks with the displacement of
    point masses, so it tracks weak convergence when the atoms move.
    """
    a = np.asarray(f_n, dtype=np.float64)
    b = np.asarray(f, dtype=np.float64)
    wa, wb = mu_n.weights, mu.weights

    def violation(h: float) -> float:
        # sup_x F(x - h) - G(x) and sup_x G(x) - F(x + h); both sides are
        # right-continuous step functions, so jump points suffice
        x1 = np.concatenate([a + h, b])
        x2 = np.concatenate([b, a - h])
        lower = np.max(_cdf(a, wa, x1 - h) - _cdf(b, wb, x1))
        upper = np.max(_cdf(b, wb, x2) - _cdf(a, wa, x2 + h))
        return max(float(lower), float(upper)) - h

    if violation(0.0) <= 0.0:
        return 0.0
    if violation(1.0) >= 0.0:
        return 1.0
    return float(bisect(violation, 0.0, 1.0, xtol=1e-13, maxiter=200, disp=False))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def bl_dictionary_description() -> List[str]:
    """Human-readable list of the bounded-Lipschitz test functions on z = (x, y)."""
    return [
        "1",
        "clip(z_k, -1, 1) for every coordinate k",
        "sin(z_k) for every coordinate k",
        "clip(z_k, -1, 1) * clip(z_l, -1, 1) / sqrt(2) for k < l",
        "sin(z_k) * sin(z_l) / sqrt(2) for k < l",
        "exp(-|z|^2)",
        "exp(-|x|^2)",
        "exp(-|y|^2)",
    ]


def bl_features(points: np.ndarray, dx: int) -> np.ndarray:
    """
    Evaluate the test-function dictionary at ``points`` of shape (N, dx + dy).

    Every column is 1-Lipschitz and bounded by 1 in absolute value.
    """
    z = np.asarray(points, dtype=np.float64)
    clipped = np.clip(z, -1.0, 1.0)
    sines = np.sin(z)
    columns = [np.ones(z.shape[0])]
    columns.extend(clipped.T)
    columns.extend(sines.T)
    for k, l in itertools.combinations(range(z.shape[1]), 2):
        columns.append(clipped[:, k] * clipped[:, l] * _INV_SQRT2)
    for k, l in itertools.combinations(range(z.shape[1]), 2):
        columns.append(sines[:, k] * sines[:, l] * _INV_SQRT2)
    columns.append(np.exp(-np.sum(z**2, axis=1)))
    columns.append(np.exp(-np.sum(z[:, :dx] ** 2, axis=1)))
    columns.append(np.exp(-np.sum(z[:, dx:] ** 2, axis=1)))
    return np.column_stack(columns)


def bounded_lipschitz(a: Coupling, b: Coupling) -> float:
    """
    Bounded-Lipschitz surrogate of the weak distance between two couplings:
    max over the fixed dictionary of |∫ phi da - ∫ phi db|.
    """
    if (a.source.dim, a.target.dim) != (b.source.dim, b.target.dim):
        raise ValueError("couplings live on spaces of different dimensions")
    dx = a.source.dim
    ia = a.matrix.reshape(-1) @ bl_features(a.cell_points(), dx)
    ib = b.matrix.reshape(-1) @ bl_features(b.cell_points(), dx)
    return float(np.abs(ia - ib).max())


def bl_dictionary_meta() -> dict:
    """Version tag and description of the bounded-Lipschitz dictionary for report metadata."""
    return {"version": BL_DICTIONARY_VERSION, "functions": bl_dictionary_description()}
