"""Discrete marginals, cost matrices and controlled perturbations of marginals."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial.distance import cdist

from .const import CANONICAL_DIGITS, WEIGHT_SUM_TOL
from .exceptions import CostError, MeasureError, ScheduleExhaustedError
from .hash import support_digest
from .utils import PathLike, read_csv, read_json, write_csv, write_json

logger = logging.getLogger(__name__)

SamplerFamily = Literal["gaussian", "gaussian-mixture", "uniform-box"]
PerturbationMode = Literal["weight-jitter", "support-jitter"]


def canonical_key(point: Sequence[float]) -> tuple:
    """Round each coordinate to 12 significant digits; ``-0.0`` maps to ``0.0``."""
    fmt = f"{{:.{CANONICAL_DIGITS - 1}e}}"
    return tuple(float(fmt.format(float(x))) + 0.0 for x in point)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """
    A probability measure on finitely many distinct points of R^d.

    Zero-weight atoms are stripped at construction; the remaining weights must
    be strictly positive and sum to one within 1e-12.
    """

    atoms: np.ndarray
    weights: np.ndarray
    keys: tuple = field(init=False, repr=False)

    def __post_init__(self) -> None:
        atoms = np.array(self.atoms, dtype=np.float64)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.ndim != 2:
            raise MeasureError(f"atoms must be a list of points, got shape {atoms.shape}")
        if atoms.shape[0] != weights.shape[0]:
            raise MeasureError(
                f"{atoms.shape[0]} atoms but {weights.shape[0]} weights"
            )
        if not np.all(np.isfinite(atoms)):
            raise MeasureError("atom coordinates must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise MeasureError("weights must be finite and nonnegative")

        keep = weights > 0
        atoms, weights = atoms[keep], weights[keep]
        if weights.size == 0:
            raise MeasureError("measure has no atom with positive weight")
        total = float(weights.sum())
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise MeasureError(f"weights sum to {total!r}, expected 1")

        keys = tuple(canonical_key(a) for a in atoms)
        if len(set(keys)) != len(keys):
            raise MeasureError("atoms must be pairwise distinct")

        object.__setattr__(self, "atoms", _readonly(atoms))
        object.__setattr__(self, "weights", _readonly(weights))
        object.__setattr__(self, "keys", keys)

    @classmethod
    def normalized(cls, atoms: Any, weights: Any) -> "DiscreteMeasure":
        """Build a measure after rescaling nonnegative weights to total mass one."""
        w = np.array(weights, dtype=np.float64).reshape(-1)
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            raise MeasureError("weights must have a positive finite total")
        return cls(atoms, w / total)

    @classmethod
    def uniform(cls, atoms: Any) -> "DiscreteMeasure":
        atoms = np.array(atoms, dtype=np.float64)
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return int(self.weights.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DiscreteMeasure):
            return NotImplemented
        return np.array_equal(self.atoms, other.atoms) and np.array_equal(
            self.weights, other.weights
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def dim(self) -> int:
        return int(self.atoms.shape[1])

    @property
    def support_id(self) -> str:
        return support_digest(self.keys)

    def with_weights(self, weights: Any) -> "DiscreteMeasure":
        return DiscreteMeasure(self.atoms, weights)

    def mean(self, values: np.ndarray) -> float:
        """Integral of a function given by its values on the atoms."""
        return float(np.dot(self.weights, values))

    def to_dict(self) -> dict:
        return {"atoms": self.atoms.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data: dict, normalize: bool = False) -> "DiscreteMeasure":
        model = MeasureModel.model_validate({**data, "normalize": normalize})
        return model.to_measure()


def same_support(p: DiscreteMeasure, q: DiscreteMeasure) -> bool:
    """True when both measures sit on the same ordered list of atoms."""
    return p.keys == q.keys


class MeasureModel(BaseModel):
    """JSON form of a measure: ``{"atoms": [[..], ..], "weights": [..]}``."""

    model_config = ConfigDict(extra="forbid")

    atoms: List[List[float]]
    weights: List[float]
    normalize: bool = False

    @field_validator("atoms")
    @classmethod
    def _rectangular(cls, atoms: List[List[float]]) -> List[List[float]]:
        if not atoms:
            raise ValueError("at least one atom is required")
        if len({len(a) for a in atoms}) != 1 or not atoms[0]:
            raise ValueError("all atoms must have the same positive dimension")
        return atoms

    def to_measure(self) -> DiscreteMeasure:
        if self.normalize:
            return DiscreteMeasure.normalized(self.atoms, self.weights)
        return DiscreteMeasure(self.atoms, self.weights)


def load_measure(path: PathLike, normalize: bool = False) -> DiscreteMeasure:
    return DiscreteMeasure.from_dict(read_json(path), normalize=normalize)


def save_measure(measure: DiscreteMeasure, path: PathLike) -> Path:
    return write_json(path, measure.to_dict())


class CostKind(str, enum.Enum):
    SQEUCLIDEAN = "sqeuclidean"
    EUCLIDEAN = "euclidean"
    MATRIX = "matrix"


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Dense nonnegative cost c(x_i, y_j); rows follow X-atoms, columns Y-atoms."""

    values: np.ndarray
    row_support: Optional[str] = None
    col_support: Optional[str] = None

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or 0 in values.shape:
            raise CostError(f"cost must be a non-empty matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise CostError("cost entries must be finite")
        if np.any(values < 0):
            i, j = np.argwhere(values < 0)[0]
            raise CostError(f"negative cost {values[i, j]!r} at ({i}, {j})")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def max_cost(self) -> float:
        return float(self.values.max())

    def scaled(self, factor: float) -> "CostMatrix":
        if not factor > 0:
            raise CostError("scale factor must be positive")
        return CostMatrix(self.values * factor, self.row_support, self.col_support)

    def check_support(self, mu: DiscreteMeasure, nu: DiscreteMeasure) -> None:
        if self.shape != (len(mu), len(nu)):
            raise CostError(
                f"cost shape {self.shape} does not match marginals ({len(mu)}, {len(nu)})"
            )
        if self.row_support is not None and self.row_support != mu.support_id:
            raise CostError("cost rows were built for a different X-support")
        if self.col_support is not None and self.col_support != nu.support_id:
            raise CostError("cost columns were built for a different Y-support")


def build_cost(
    X: DiscreteMeasure,
    Y: DiscreteMeasure,
    kind: Union[CostKind, str] = CostKind.SQEUCLIDEAN,
    matrix: Any = None,
) -> CostMatrix:
    """
    Cost matrix between the atoms of ``X`` and ``Y``.

    Args:
        kind: ``sqeuclidean`` (the default quadratic cost), ``euclidean`` or
            ``matrix`` for a user-supplied m×n array passed as ``matrix``.

    Raises:
        CostError: on atom dimension mismatch, a wrongly shaped user matrix or
            a negative entry.
    """
    kind = CostKind(kind)
    if kind is CostKind.MATRIX:
        if matrix is None:
            raise CostError("cost kind 'matrix' requires a matrix")
        values = np.array(matrix, dtype=np.float64)
        if values.shape != (len(X), len(Y)):
            raise CostError(
                f"user cost has shape {values.shape}, expected ({len(X)}, {len(Y)})"
            )
    else:
        if X.dim != Y.dim:
            raise CostError(f"atom dimensions differ: {X.dim} vs {Y.dim}")
        values = cdist(X.atoms, Y.atoms, metric=kind.value)
    return CostMatrix(values, X.support_id, Y.support_id)


def load_cost_matrix(path: PathLike) -> np.ndarray:
    """Read a raw cost matrix from header-free row-major CSV or from JSON."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = read_json(path)
        if isinstance(data, dict):
            data = data["values"]
        return np.array(data, dtype=np.float64)
    header, rows = read_csv(path)
    return np.array([header, *rows], dtype=np.float64)


def save_cost_matrix(C: CostMatrix, path: PathLike) -> Path:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return write_json(
            path,
            {
                "values": C.values.tolist(),
                "row_support": C.row_support,
                "col_support": C.col_support,
            },
        )
    rows = C.values.tolist()
    return write_csv(path, rows[0], rows[1:])


def support_diameter_sq(X: DiscreteMeasure, Y: DiscreteMeasure) -> float:
    """Largest squared distance between an X-atom and a Y-atom."""
    return float(cdist(X.atoms, Y.atoms, metric="sqeuclidean").max())


def sample_subgaussian(
    n_atoms: int,
    d: int = 1,
    family: SamplerFamily = "gaussian",
    seed: int = 0,
) -> DiscreteMeasure:
    """
    Empirical measure of ``n_atoms`` i.i.d. draws from a subgaussian law.

    ``gaussian`` is the standard normal, ``gaussian-mixture`` an equal mixture
    of N(±1.5·1, 0.25·I) and ``uniform-box`` the uniform law on [-1, 1]^d.
    Weights are uniform; the result is a deterministic function of ``seed``.
    """
    if n_atoms < 1:
        raise MeasureError("n_atoms must be at least 1")
    if d < 1:
        raise MeasureError("dimension must be at least 1")
    rng = np.random.default_rng(seed)
    if family == "gaussian":
        atoms = rng.standard_normal((n_atoms, d))
    elif family == "gaussian-mixture":
        centers = np.array([-1.5, 1.5])[rng.integers(0, 2, size=n_atoms)]
        atoms = centers[:, None] + 0.5 * rng.standard_normal((n_atoms, d))
    elif family == "uniform-box":
        atoms = rng.uniform(-1.0, 1.0, size=(n_atoms, d))
    else:
        raise MeasureError(f"unknown sampler family: {family}")
    return DiscreteMeasure(atoms, np.full(n_atoms, 1.0 / n_atoms))


class PerturbationSpec(BaseModel):
    """How the n-th perturbed marginal is derived from a base marginal."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: PerturbationMode = "weight-jitter"
    schedule: List[float] = Field(min_length=1)
    seed: int = 0
    floor: Optional[float] = Field(default=None, gt=0)

    @field_validator("schedule")
    @classmethod
    def _decreasing(cls, schedule: List[float]) -> List[float]:
        arr = np.asarray(schedule, dtype=np.float64)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("schedule entries must be finite and nonnegative")
        if np.any(np.diff(arr) >= 0):
            raise ValueError("schedule must be strictly decreasing")
        return schedule

    @classmethod
    def geometric(
        cls,
        mode: PerturbationMode,
        length: int,
        ratio: float = 0.5,
        seed: int = 0,
        floor: Optional[float] = None,
    ) -> "PerturbationSpec":
        """Schedule δ_n = ratio**n for n = 1..length."""
        schedule = [ratio**n for n in range(1, length + 1)]
        return cls(mode=mode, schedule=schedule, seed=seed, floor=floor)

    def delta(self, n: int) -> float:
        if n < 1:
            raise ValueError("perturbation index starts at 1")
        if n > len(self.schedule):
            raise ScheduleExhaustedError(n, len(self.schedule))
        return float(self.schedule[n - 1])

    def for_target(self) -> "PerturbationSpec":
        """Same schedule with an independent random stream for the Y-marginal."""
        return self.model_copy(update={"seed": self.seed + 1})


def perturb(base: DiscreteMeasure, spec: PerturbationSpec, n: int) -> DiscreteMeasure:
    """
    The n-th perturbation of ``base``.

    weight-jitter keeps the atoms and moves each weight by a relative amount
    of order δ_n, at most δ_n in total variation, clamping each weight below
    by ``floor·min(w)`` so the result stays equivalent to ``base``. support-jitter keeps the weights and moves
    every atom by a vector of norm at most δ_n.
    """
    delta = spec.delta(n)
    if delta == 0:
        return base
    rng = np.random.default_rng([spec.seed, n])
    m = len(base)

    if spec.mode == "weight-jitter":
        floor = spec.floor if spec.floor is not None else 1.0 / (2 * m)
        if not 0 < floor <= 1.0 / m:
            raise MeasureError(f"floor {floor!r} must lie in (0, 1/{m}]")
        w = base.weights
        # relative jitter: xi_i = w_i (u_i - E_w[u]) so sum(xi) = 0 and sum|xi| <= 1
        u = rng.uniform(-1.0, 1.0, size=m)
        xi = w * (u - np.dot(w, u))
        total = np.abs(xi).sum()
        if total > 1.0:
            xi /= total
        candidate = np.maximum(w + delta * xi, floor * w.min())
        candidate /= candidate.sum()
        tv = 0.5 * float(np.abs(candidate - w).sum())
        if tv > delta:
            candidate = w + (delta / tv) * (candidate - w)
            candidate /= candidate.sum()
        logger.debug("weight-jitter n=%d delta=%g tv=%g", n, delta, min(tv, delta))
        return base.with_weights(candidate)

    directions = rng.standard_normal(size=base.atoms.shape)
    norms = np.linalg.norm(directions, axis=1)
    norms[norms == 0] = 1.0
    radii = delta * rng.uniform(0.0, 1.0, size=m)
    displacement = directions * (radii / norms)[:, None]
    lengths = np.linalg.norm(displacement, axis=1)
    over = lengths > delta
    displacement[over] *= (delta / lengths[over])[:, None]
    return DiscreteMeasure(base.atoms + displacement, base.weights)
