"""Exception types shared across the library."""


class FptError(ValueError):
    """Base class for all library errors."""


class ShapeError(FptError):
    """Tensor dimensions are inconsistent with the requested operation."""


class ConfigError(FptError):
    """A configuration value violates its constraints."""


class NumericsError(FptError):
    """A non-finite value (NaN/Inf) appeared where finite values are required."""


class ContractError(FptError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""
