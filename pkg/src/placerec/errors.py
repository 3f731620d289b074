"""Exception types shared across the package."""


class PlacerecError(Exception):
    """Base class for all errors raised by this package."""


class EmptyInput(PlacerecError):
    """An operation received an empty cloud / empty support set."""


class InvalidParameter(PlacerecError):
    """A numeric parameter is out of its valid range."""


class EmptyCrop(PlacerecError):
    """A frustum crop produced no points (caller decides whether to skip)."""


class ShapeError(PlacerecError):
    """Array shapes are inconsistent with the operation's contract."""


class StateError(PlacerecError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class ConvergenceError(PlacerecError):
    """An iterative procedure did not converge within its iteration budget."""


class ConfigError(PlacerecError):
    """A configuration is internally contradictory or infeasible."""


class InsufficientPositives(PlacerecError):
    """An anchor does not have enough positive candidates for a tuple."""


class InsufficientNegatives(PlacerecError):
    """Not enough qualifying negative candidates for a tuple."""


class NumericsError(PlacerecError):
    """Training diverged (non-finite loss)."""
