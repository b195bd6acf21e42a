"""Exception hierarchy shared by all modules."""


class MsadError(Exception):
    """Base class for runtime failures (I/O, numerics, malformed input)."""


class ConfigError(MsadError):
    """A configuration value violates a documented constraint.

    ``constraint`` is a short stable identifier such as ``"ell-range"`` or
    ``"dt-cap"`` so callers and tests can match on it.
    """

    def __init__(self, message, constraint=None):
        super().__init__(message)
        self.constraint = constraint


class FormatError(MsadError):
    """A binary file does not match its declared layout."""

    def __init__(self, message, path=None, offset=None):
        where = ""
        if path is not None:
            where = f" [{path}"
            if offset is not None:
                where += f" @ byte {offset}"
            where += "]"
        super().__init__(message + where)
        self.path = path
        self.offset = offset


class QuadratureError(MsadError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message, radius=None, residual=None):
        super().__init__(message)
        self.radius = radius
        self.residual = residual


class InstabilityError(MsadError):
    """A time integrator left its stability region (CFL, runaway particles)."""


class InvariantViolation(MsadError):
    """A mathematical invariant failed (CKP, Gibbs, mass conservation).

    Reserved for genuine numerical/mathematical failures; the CLI maps it to
    exit status 3.
    """
