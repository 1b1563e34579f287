"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes, so each class carries the code
it should terminate with.
"""


class TrustError(Exception):
    exit_code = 1


class DimensionError(TrustError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(TrustError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(TrustError, ArithmeticError):
    """Non-finite values reached an operation that cannot accept them."""


class ConfigError(TrustError, ValueError):
    exit_code = 2


class DataError(TrustError, OSError):
    exit_code = 3


class GenerationError(DataError):
    """The procedural generator could not place a valid lesion."""


class StratificationError(DataError):
    pass


class UndefinedMetricError(TrustError, ValueError):
    pass


class DegenerateProjectionError(TrustError, ValueError):
    pass


class FormatError(TrustError, ValueError):
    exit_code = 4


class CorruptionError(FormatError):
    """The container header parsed but its contents are inconsistent."""
