"""Exception types raised across the package.

Every error that callers are expected to catch derives from :class:`NormError`,
so ``except NormError`` at a CLI or script boundary is sufficient to convert
any domain failure into an exit code.
"""


class NormError(Exception):
    """Base class for all package-specific errors."""


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------

class ParseError(NormError):
    """A mesh or data file is malformed and cannot be read."""


class DegenerateCell(NormError):
    """A cell has (numerically) zero measure."""


class IndexOutOfRange(NormError):
    """A cell references a vertex index outside the vertex table."""


class UnsupportedCellKind(NormError):
    """The file or argument names a cell kind this package does not handle."""


class DimensionMismatch(NormError):
    """Array shapes are inconsistent with each other or with the mesh."""


# ---------------------------------------------------------------------------
# spectral
# ---------------------------------------------------------------------------

class ConvergenceFailure(NormError):
    """The iterative eigensolver did not converge within its budget."""


class RankDeficient(NormError):
    """A matrix that must have full column rank does not."""


class TooFewSnapshots(NormError):
    """Fewer snapshots than requested modes."""


class InvalidModeCount(NormError):
    """A mode count violates its constraints (bounds, parity)."""


class ZeroEigenvalue(NormError):
    """An eigenvalue required to be positive is (numerically) zero."""


# ---------------------------------------------------------------------------
# operator
# ---------------------------------------------------------------------------

class InvalidSpec(NormError):
    """A model description is internally inconsistent."""


class DomainMismatch(NormError):
    """A field lives on a different domain than the operator expects."""


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class ZeroTarget(NormError):
    """Relative error is undefined for an identically-zero target."""


class EmptyBatch(NormError):
    """A metric or update was requested over zero samples."""


class ShapeMismatch(NormError):
    """Parameter and gradient structures do not line up."""


class NonFiniteLoss(NormError):
    """Training produced a NaN or infinite loss; carries the sample index."""

    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class ZeroVarianceWarning(UserWarning):
    """A normalization channel has (numerically) zero variance."""


# ---------------------------------------------------------------------------
# datagen
# ---------------------------------------------------------------------------

class NonPositiveCoefficient(NormError):
    """A diffusion coefficient field is not strictly positive."""


class SingularSystem(NormError):
    """A linear solve failed or left a residual above tolerance."""


class BoundaryNotFound(NormError):
    """A mesh has no boundary where one is required."""
