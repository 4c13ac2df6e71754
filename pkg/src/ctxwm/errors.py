"""Exception types shared across the package."""


class CtxwmError(Exception):
    pass


class DimensionError(CtxwmError, ValueError):
    pass


class ConfigError(CtxwmError, ValueError):
    pass


class ContractError(CtxwmError, RuntimeError):
    pass


class NumericError(CtxwmError, FloatingPointError):
    pass


class RegistryError(CtxwmError, KeyError):
    pass


class FormatError(CtxwmError, ValueError):
    """Unreadable or unknown-version artifact file."""


class EmptyDatasetError(CtxwmError, ValueError):
    pass
