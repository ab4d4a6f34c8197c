"""Exception hierarchy.

Every error raised on purpose by the package derives from ``NlRenewalError``.
The CLI maps the two top-level families onto exit codes: configuration
problems exit with 2, numerical failures with 3.
"""


class NlRenewalError(Exception):
    pass


class ConfigError(NlRenewalError, ValueError):
    """Invalid model, parameter or experiment configuration."""


class DriftError(ConfigError):
    """The walk does not have the positive drift an operation requires."""


class BoundaryError(ConfigError):
    """Boundary too small for the requested comparison rule."""


class ShapeError(ConfigError):
    """Malformed rank configuration (unequal sample sizes)."""


class BranchError(ConfigError):
    """Formula evaluated outside the parameter branch it belongs to."""


class DomainError(ConfigError):
    """Logarithm argument leaves the positive half-line."""


class NumericsError(NlRenewalError, ArithmeticError):
    """Quadrature or extrapolation failure."""


class TieError(NumericsError):
    """Two observations in the combined sample coincide."""
