"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration/contract problems -> 1,
I/O problems -> 2, numeric problems -> 3.
"""


class AxmError(Exception):
    pass


class DimensionError(AxmError):
    """Shape mismatch. Messages name the offending axis."""


class ContractError(AxmError):
    """A documented precondition was violated by the caller."""


class ConfigError(AxmError):
    """Invalid configuration value or config-file syntax."""


class ProtocolError(AxmError):
    """Evaluation protocol cannot be satisfied (e.g. query without relevant gallery)."""


class NumericError(AxmError):
    """Non-finite values or numerically impossible request."""


class DegenerateInputError(NumericError):
    """Mathematically degenerate input, e.g. normalizing a zero vector."""
