"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class NumericsError(RuntimeError):
    """Training encountered a non-finite quantity and must abort."""
