"""Exception types raised across the package."""


class SparseLabError(Exception):
    """Base class for all package errors."""


class DomainError(SparseLabError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class RegimeError(SparseLabError, ValueError):
    """Parameters are outside the sparse regime (e.g. Np < 1)."""


class SizeError(SparseLabError, ValueError):
    """A size guard was exceeded (dense cap, derivative order, index count)."""


class PreconditionError(SparseLabError, ValueError):
    """A documented precondition does not hold."""


class ClassError(PreconditionError):
    """A formal monomial is not in the class required by the operation."""


class UnsupportedModelError(SparseLabError, NotImplementedError):
    """The operation is not defined for this ensemble kind."""


class DegenerateGraphError(SparseLabError, ValueError):
    """The sampled graph is degenerate (e.g. has no edges)."""


class ShapeError(SparseLabError, ValueError):
    """A polynomial is outside the perturbative regime (no spectral edge found)."""


class ConfigError(SparseLabError, ValueError):
    """An experiment or CLI configuration is invalid."""


class ConvergenceError(SparseLabError, RuntimeError):
    """An iterative method hit its iteration cap."""

    def __init__(self, message, best_residual=float("nan")):
        super().__init__(message)
        self.best_residual = best_residual


class ContinuationError(SparseLabError, RuntimeError):
    """Root continuation lost the Stieltjes branch."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
