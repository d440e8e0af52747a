"""Exception hierarchy shared across the package."""


class BsdeLabError(Exception):
    """Base class for every error raised by this package."""


class BadGrid(BsdeLabError):
    """Time grid construction rejected (non-positive horizon, too few steps)."""


class ConfigError(BsdeLabError):
    """Invalid configuration value or unknown config key."""


class NonFiniteCoefficient(BsdeLabError):
    """A model coefficient returned NaN or inf at a probe point."""


class NonFiniteState(BsdeLabError):
    """Forward simulation produced a non-finite state."""


class ShapeMismatch(BsdeLabError):
    """Array arguments do not line up with the grid or with each other."""


class SingularBasis(BsdeLabError):
    """Normal equations unsolvable even after the ridge fallback."""


class Blowup(BsdeLabError):
    """Backward recursion exceeded the blow-up guard threshold."""


class OverflowInExponent(BsdeLabError):
    """An exponent is large enough to overflow exp() in double precision."""


class InsufficientHs(BsdeLabError):
    """Convergence study needs >= 3 distinct step sizes spanning >= 2 decades."""


class SingularVariation(BsdeLabError):
    """First-variation matrix not invertible at a requested node."""


class MissingDiagonal(BsdeLabError):
    """Trace check requested without the diagonal theta-grid entries."""


class DomainError(BsdeLabError):
    """Argument outside the mathematical domain of a diagnostic function."""


class EmptyInput(BsdeLabError):
    """Table emission called with no rows or with non-finite cells."""


class UnknownFixture(BsdeLabError):
    """Fixture id does not resolve in the registry."""
