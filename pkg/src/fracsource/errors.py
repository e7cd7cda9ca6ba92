"""Exception hierarchy shared by the numerical stages and the CLI."""


class FracSourceError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FracSourceError, ValueError):
    """Invalid user input: mesh sizes, grids, masks, run configuration."""

    exit_code = 2


class NumericalError(FracSourceError, RuntimeError):
    """A numerical stage failed (assembly, eigensolve, linear solve)."""

    exit_code = 3


class AssemblyError(NumericalError):
    pass


class EigenSolverError(NumericalError):
    pass


class VolterraError(NumericalError):
    pass


class EpsilonSelectionError(NumericalError):
    pass


class PreconditionError(FracSourceError, ValueError):
    """A theorem hypothesis does not hold (sigma(T) = 0, c_n ~ 0, s <= 1/2 under --strict)."""

    exit_code = 4


class ValidityWarning(UserWarning):
    """Run outside the regime where the reconstruction theory applies (s <= 1/2)."""
