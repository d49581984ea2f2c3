"""Exception hierarchy shared by all cru modules."""


class CruError(Exception):
    """Base class for all library errors."""


class DimensionError(CruError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(CruError, ValueError):
    """A configuration value is out of its documented range."""


class ContractError(CruError, RuntimeError):
    """A caller violated an operation's precondition."""


class NumericError(CruError, ArithmeticError):
    """A computation produced non-finite values."""


class ParseError(CruError, ValueError):
    """An input file does not match its documented format."""
