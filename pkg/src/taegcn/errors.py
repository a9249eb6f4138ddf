"""Exception types shared across the package.

Every error raised on a contract violation derives from TaegcnError so
callers (and the command line front end) can map failures to coarse
categories without string matching.
"""


class TaegcnError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(TaegcnError):
    """Operands have incompatible or unexpected dimensions."""


class ContractError(TaegcnError):
    """An operation precondition was violated (non-scalar backward seed,
    fully masked softmax row, negative adjacency entry, ...)."""


class ConfigError(TaegcnError):
    """A configuration value or combination of values is invalid."""


class DataError(TaegcnError):
    """Input data could not be parsed or fails a dataset invariant."""


class DivergenceError(TaegcnError):
    """Training produced a non-finite loss."""


class UsageError(TaegcnError):
    """Bad command line invocation."""
