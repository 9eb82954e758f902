"""Exception hierarchy shared by all modules."""


class PbdRegError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PbdRegError, ValueError):
    """Invalid configuration or input data."""


class DegenerateConstraint(PbdRegError):
    """A constraint has no well-defined projection direction."""


class DegenerateCluster(PbdRegError):
    """A shape-matching cluster has a rank-deficient cross-covariance."""


class NonFiniteState(PbdRegError, FloatingPointError):
    """A particle position or velocity became NaN or infinite."""


class InsufficientPoints(ValidationError):
    pass


class NonHeightField(ValidationError):
    pass


class InvertedTet(PbdRegError):
    pass


class EmptyCloud(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class OutOfBounds(PbdRegError):
    """A query point lies outside the grid box."""


class UnknownKind(ValidationError):
    pass


class ParseError(ValidationError):
    """A point-cloud file could not be parsed.

    ``line`` is the 1-based line number of the offending row, or ``None``
    when the failure is not tied to a single line.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
