"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """Non-finite values, failed factorisations and similar numerical breakdowns."""


class ModelFormatError(ValueError):
    """A serialized model is truncated, corrupted or has an unknown version."""
