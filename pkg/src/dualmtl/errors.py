"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class InputError(ValueError):
    """An input array contains non-finite values."""


class OptimizerError(RuntimeError):
    """An optimizer update received a non-finite gradient.

    The message names the offending parameter block.
    """


class DivergenceError(RuntimeError):
    """Training produced a non-finite objective; message carries epoch/batch."""


class SchemaError(ValueError):
    """A data or config file does not match its documented schema."""
