"""Exception types shared across the package."""


class SpectuneError(Exception):
    pass


class SizeError(SpectuneError, ValueError):
    """Shapes or counts are inconsistent."""


class ConfigError(SpectuneError, ValueError):
    pass


class DataError(SpectuneError, ValueError):
    pass


class NumericError(SpectuneError, ArithmeticError):
    """Non-finite values or a solver that failed to converge."""


class ContractError(SpectuneError, ValueError):
    """An input violated an operation's precondition (e.g. asymmetric matrix)."""


class RangeError(SpectuneError, ValueError):
    pass
