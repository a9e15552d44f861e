"""Exception types shared across the package."""


class HRDNetError(Exception):
    """Base class for all package errors."""


class InvalidInputError(HRDNetError, ValueError):
    pass


class AlignmentError(HRDNetError, ValueError):
    """Raised when spatial dimensions break the stride/pyramid divisibility contract."""


class ConfigError(HRDNetError, ValueError):
    pass


class NumericError(HRDNetError, ArithmeticError):
    pass


class AnnotationError(HRDNetError, ValueError):
    pass
