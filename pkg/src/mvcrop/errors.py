"""Shared exception types for contract violations."""


class ShapeError(ValueError):
    """Operand shapes or batch extents violate an operation's contract."""


class ConfigError(ValueError):
    """A structural, schema, or hyperparameter setting is illegal."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite math was required."""


class FormatError(ValueError):
    """A serialized artifact (container, checkpoint, CSV) is malformed."""
