"""Exception hierarchy shared by every module."""


class SubspaceLabError(Exception):
    """Base class for all library errors."""


class DimensionError(SubspaceLabError, ValueError):
    pass


class ConfigError(SubspaceLabError, ValueError):
    pass


class StateError(SubspaceLabError, RuntimeError):
    pass


class ContractError(SubspaceLabError, ValueError):
    pass


class NumericError(SubspaceLabError, ArithmeticError):
    pass


class DegenerateError(NumericError):
    """Raised when a normalization would divide by (almost) zero."""


class ParseError(SubspaceLabError, ValueError):
    pass


class DatasetError(SubspaceLabError, ValueError):
    pass
