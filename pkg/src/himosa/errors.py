"""Exception types shared across the package."""


class HimosaError(Exception):
    pass


class DimensionError(HimosaError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HimosaError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(HimosaError, ValueError):
    """A configuration value is malformed or inconsistent."""


class CheckpointError(HimosaError, IOError):
    pass
