"""Exception hierarchy shared across the package."""


class RobustIrlError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RobustIrlError, ValueError):
    """Inconsistent dimensions, bad config files, unreachable goals."""


class ValidationError(RobustIrlError, ValueError):
    """A probability table or distribution violates its invariants."""


class PreconditionError(RobustIrlError, ValueError):
    """Inputs outside an operation's admissible domain."""


class CapacityError(RobustIrlError):
    """Exhaustive enumeration would exceed the configured cap."""


class DivergenceError(RobustIrlError):
    """The dual objective became non-finite during optimization.

    ``last_theta`` holds the last iterate with a finite dual value.
    """

    def __init__(self, message, last_theta=None):
        super().__init__(message)
        self.last_theta = last_theta


class SingularityError(RobustIrlError, ValueError):
    """The listener lies on the emitter's path, so intensity is unbounded."""


class DegenerateEvidenceError(RobustIrlError):
    """Every trajectory has zero joint mass with an observation sequence."""

    def __init__(self, message, omega_index=None):
        super().__init__(message)
        self.omega_index = omega_index
