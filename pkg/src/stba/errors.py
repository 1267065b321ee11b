"""Exception types shared across the package."""


class StbaError(Exception):
    """Base class for all package errors."""


class DegenerateProjection(StbaError):
    """Point projects through (or too close to) the camera plane."""


class InvalidProblem(StbaError):
    """Input violates a bundle-problem invariant."""


class BalParseError(StbaError):
    """Malformed BAL text file."""


class SingularPointBlock(StbaError):
    """A damped 3x3 point block failed factorization."""


class SingularVirtualBlock(StbaError):
    """A damped 3x3 virtual-point block failed factorization."""


class NotPositiveDefinite(StbaError):
    """Cholesky failed on a reduced camera matrix."""


class PcgStalled(StbaError):
    """PCG did not reach the requested tolerance within the iteration cap."""


class InfeasibleSpec(StbaError):
    """Synthetic-problem spec cannot satisfy the problem invariants."""
