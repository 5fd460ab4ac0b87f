"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class FrsError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FrsError, ValueError):
    """Invalid scenario configuration (CLI exit code 2)."""


class NumericalFault(FrsError, ArithmeticError):
    """A numerical precondition failed during computation (CLI exit code 4)."""


class NotPositiveDefiniteError(NumericalFault):
    pass


class EmptyIntersectionError(NumericalFault):
    """Ellipsoid fusion produced delta >= 1, i.e. no certificate of a nonempty intersection."""


class GimbalLockError(NumericalFault):
    """Pitch angle too close to +-pi/2 for the Euler-rate map to be invertible."""


class DegenerateThrustError(NumericalFault):
    """Desired thrust vector vanished so its direction is undefined."""


class SoundnessViolation(FrsError):
    """A sampled trajectory left a reachable-set tube (CLI exit code 3)."""
