"""Exception hierarchy shared by every layer of the package."""


class MscError(Exception):
    """Base class for all package errors."""


class ShapeError(MscError, ValueError):
    pass


class NumericError(MscError, ArithmeticError):
    pass


class UsageError(MscError):
    pass


class DataError(MscError):
    pass


class ConfigError(MscError, ValueError):
    pass
