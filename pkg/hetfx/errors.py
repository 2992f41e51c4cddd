"""Error taxonomy.

Two branches: ``DataError`` for problems with the inputs (the CLI exits with 2)
and ``NumericalError`` for failures of the numerics (the CLI exits with 3).
"""

from __future__ import annotations


class HetfxError(Exception):
    """Base class for every error raised by hetfx."""


# ---------------------------------------------------------------------------
# Input / validation errors
# ---------------------------------------------------------------------------

class DataError(HetfxError):
    """Invalid input data or configuration."""


class DimensionMismatch(DataError):
    """Array shapes that must agree do not."""


class OutOfRangeCategory(DataError):
    """A treatment value lies outside {0, ..., J}."""

    def __init__(self, value: float, row: int, n_treatments: int):
        self.value = value
        self.row = row
        self.n_treatments = n_treatments
        super().__init__(
            f"category out of range: value {value!r} at row {row} "
            f"(expected an integer in 0..{n_treatments})"
        )


class MissingCategory(DataError):
    """A treatment category has no observations."""

    def __init__(self, category: int):
        self.category = category
        super().__init__(f"treatment category {category} has no observations")


class BadCategory(DataError):
    """A requested category index is not valid for the fitted model."""


class EmptyCell(DataError):
    """A covariate cell of a discrete design has no observations."""


class ContinuousCovariate(DataError):
    """The cell-based contamination oracle was given a continuous covariate."""


class EmptySubsampleSide(DataError):
    """The subsample D in {0, d} lacks one of its two categories."""


class InvalidSpecCombination(DataError):
    """A simulation design combination that does not appear in the study panels."""


class ColumnNotFound(DataError):
    """A column binding does not name a column of the input table."""

    def __init__(self, column: str, available: list[str]):
        self.column = column
        super().__init__(f"column {column!r} not found; available: {', '.join(available)}")


class MissingValues(DataError):
    """A bound column holds missing or non-finite values."""

    def __init__(self, column: str, row: int):
        self.column = column
        self.row = row
        super().__init__(f"column {column!r} has a missing or non-finite value at row {row}")


class InvalidConfig(DataError):
    """A run configuration violates a precondition."""


# ---------------------------------------------------------------------------
# Numerical failures
# ---------------------------------------------------------------------------

class NumericalError(HetfxError, ArithmeticError):
    """A numerical procedure failed."""


class RankDeficient(NumericalError):
    """A design matrix is rank deficient at the solver tolerance."""

    def __init__(self, column: int, label: str | None = None):
        self.column = column
        self.label = label
        name = f" ({label})" if label else ""
        super().__init__(f"design matrix is rank deficient at column {column}{name}")


class SingularCovariance(NumericalError):
    """The averaged treatment-dummy covariance matrix is not invertible."""


class Nonconvergence(NumericalError):
    """An iterative maximizer stopped before meeting its convergence criteria."""

    def __init__(self, iterations: int, gradnorm: float):
        self.iterations = iterations
        self.gradnorm = gradnorm
        super().__init__(
            f"maximum likelihood did not converge after {iterations} iterations "
            f"(gradient norm {gradnorm:.3g})"
        )


class SeparationSuspected(NumericalError):
    """Fitted probabilities collapse to zero while the fit itself diverges."""


class DegenerateDenominator(NumericalError):
    """P_0 + P_d is numerically zero for some observation."""


class DegeneratePsr(NumericalError):
    """All propensity-score residuals on the subsample are numerically zero."""


class SingularScoreOuterProduct(NumericalError):
    """The averaged outer product of the scores cannot be inverted."""


class ExcessFailures(NumericalError):
    """Too many Monte Carlo repetitions or bootstrap replicates failed."""

    def __init__(self, failed: int, total: int, limit: float):
        self.failed = failed
        self.total = total
        super().__init__(
            f"{failed} of {total} repetitions failed (limit {limit:.0%})"
        )


# Failures that drop a single Monte Carlo repetition or bootstrap replicate
# instead of aborting the run.
REPLICATE_FAILURES: tuple[type[HetfxError], ...] = (
    NumericalError,
    MissingCategory,
    EmptySubsampleSide,
)
