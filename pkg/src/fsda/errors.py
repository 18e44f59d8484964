"""Exception hierarchy shared by every module.

Everything subclasses :class:`FsdaError` so the CLI can map failures to exit
code 1 with one ``except`` clause.
"""


class FsdaError(Exception):
    pass


class FormatError(FsdaError, ValueError):
    """Bad magic, unsupported version or otherwise malformed binary file."""


class TruncationError(FormatError):
    """File is shorter than its header claims."""


class DataError(FsdaError, ValueError):
    """Values violate a table invariant (non-finite, label out of range...)."""


class DimensionError(FsdaError, ValueError):
    pass


class AlignmentError(DimensionError):
    """Two tables that must describe the same samples do not."""


class ConfigError(FsdaError, ValueError):
    pass


class ContractError(FsdaError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(FsdaError, ArithmeticError):
    pass


class TrainingError(FsdaError, RuntimeError):
    pass
