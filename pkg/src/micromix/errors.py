"""Exception hierarchy shared by all micromix modules."""


class MicromixError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(MicromixError):
    """A cell of an input file could not be parsed.

    Carries ``row`` and ``col`` (0-based, data coordinates) when known.
    """

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class ValidationError(MicromixError):
    """An object or file violates a structural invariant."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class DomainError(MicromixError):
    """An argument is outside the mathematical domain of an operation."""


class IoError(MicromixError):
    """File could not be read or written."""


class SchemaError(MicromixError):
    """A persisted model file is missing fields or has the wrong layout."""


class InfeasibleSpecError(MicromixError):
    """A requested graph specification cannot be realized."""


class UnsplittableError(MicromixError):
    """K-means could not produce K nonempty clusters after retries."""


class ComponentDeathError(MicromixError):
    """A mixture component lost all responsibility mass."""


class FitError(MicromixError):
    """All restarts of a fit failed; carries per-restart diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NonconvergenceError(MicromixError):
    """MCMC chains failed the convergence gate within the extension budget."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class RefusalError(MicromixError):
    """A command refused to overwrite existing output without --force."""


class SpdRepairWarning(UserWarning):
    """A matrix lost positive definiteness and was repaired by eigenvalue flooring."""
