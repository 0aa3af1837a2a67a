"""Exception hierarchy shared by the library and the CLI."""


class BalayageError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(BalayageError, ValueError):
    """An argument lies outside the domain of the operation."""


class StructuralError(BalayageError):
    """Geometry violates a structural requirement (overlap, containment, delta-family)."""


class NumericalError(BalayageError):
    """A quadrature or solver did not reach its tolerance."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SolverFailure(NumericalError):
    """The shrink solver or an experiment stage could not meet its budget."""
