"""Exception hierarchy.

Every numerical failure derives from :class:`NumericalError`; every problem
with user-supplied inputs derives from :class:`InputError`.  Errors raised
inside a multi-stage pipeline carry the name of that stage in ``stage``.
"""

from __future__ import annotations


class ElfusionError(Exception):
    """Base class for all package errors."""

    stage: str | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        if self.stage:
            return f"[{self.stage}] {msg}"
        return msg


class InputError(ElfusionError, ValueError):
    pass


class MissingColumn(InputError):
    def __init__(self, column: str):
        super().__init__(f"missing column {column!r}")
        self.column = column


class NonNumericCell(InputError):
    def __init__(self, column: str, row: int, value: str):
        super().__init__(f"non-numeric cell {value!r} in column {column!r}, data row {row}")
        self.column = column
        self.row = row
        self.value = value


class NotSymmetric(InputError):
    pass


class NotPositiveDefinite(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class ConfigInvalid(InputError):
    pass


class NumericalError(ElfusionError, ArithmeticError):
    pass


class NoConvergence(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class WeightedSolveDiverged(NumericalError):
    pass


class Separation(WeightedSolveDiverged):
    """Logistic coefficients diverge (complete or quasi-complete separation)."""


class ZeroNotInHull(NumericalError):
    """Zero is not in the interior of the convex hull of the moment rows."""


class InfeasibleMultiplier(NumericalError):
    pass


class InnerInfeasible(NumericalError):
    pass


class Oscillation(NumericalError):
    pass


class ExtremePropensity(NumericalError):
    pass


class Unidentified(NumericalError):
    pass


class TooManyFailures(NumericalError):
    pass
