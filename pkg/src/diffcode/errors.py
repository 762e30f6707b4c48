"""Exception types shared across the package."""


class DiffCodeError(Exception):
    pass


class ContractError(DiffCodeError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NonFiniteError(DiffCodeError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(DiffCodeError):
    """Run configuration or checkpoint chain is invalid."""
