from __future__ import annotations


class EOTError(Exception):
    """Base class of every error raised by eot-stability."""


class MeasureError(EOTError, ValueError):
    pass


class CostError(EOTError, ValueError):
    pass


class ScheduleExhaustedError(EOTError, IndexError):
    def __init__(self, n: int, length: int) -> None:
        super().__init__(
            f"perturbation schedule has {length} entries, index n={n} is out of range"
        )
        self.n = n
        self.length = length


class PotentialOverflowError(EOTError, FloatingPointError):
    def __init__(self, i: int, j: int, exponent: float) -> None:
        super().__init__(
            f"log-density exponent {exponent:.6g} at cell ({i}, {j}) exceeds the overflow guard"
        )
        self.cell = (i, j)
        self.exponent = exponent


class NormalizationError(EOTError, ValueError):
    pass


class OracleSizeError(EOTError, ValueError):
    pass


class SeparabilityError(EOTError):
    """The log-density of a coupling is not of the form f(x) + g(y) - c(x, y)."""

    def __init__(self, residual: float, threshold: float) -> None:
        super().__init__(
            f"separability residual {residual:.3e} exceeds {threshold:.3e}; "
            "the coupling is not an entropic optimizer"
        )
        self.residual = residual
        self.threshold = threshold


class MassDriftError(EOTError, FloatingPointError):
    def __init__(self, side: str, t: int, drift: float) -> None:
        super().__init__(f"{side} marginal of iterate t={t} drifted {drift:.3e} from unit mass")
        self.side = side
        self.t = t
        self.drift = drift


class ReferenceNotConvergedError(EOTError, RuntimeError):
    pass


class ReportError(EOTError, OSError):
    def __init__(self, path, cause: Exception, operation: str = "write") -> None:
        super().__init__(f"failed to {operation} {path}: {cause}")
        self.path = path
        self.operation = operation
