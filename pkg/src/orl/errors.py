"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a gradient, loss or parameter."""

    def __init__(self, message, *, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class FormatError(ValueError):
    """A binary file is malformed; ``section`` names the failing part."""

    def __init__(self, message, *, section=None):
        super().__init__(message)
        self.section = section


class VersionError(FormatError):
    """Magic bytes or format version are not the ones this build writes."""


class DegenerateMeanError(ZeroDivisionError):
    """A percent deviation was requested relative to a (near) zero baseline."""


class UnknownEnvironmentError(KeyError):
    pass
