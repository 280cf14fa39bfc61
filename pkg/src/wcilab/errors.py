"""Exception hierarchy shared by every wcilab module."""


class WciLabError(Exception):
    """Base class for all errors raised by wcilab."""


class LayoutError(WciLabError, ValueError):
    """Parameter or tensor layout does not match what the program expects."""


class NumericError(WciLabError, ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, node_id=None, sample_index=None):
        super().__init__(message)
        self.node_id = node_id
        self.sample_index = sample_index


class StateError(WciLabError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class SpecError(WciLabError, ValueError):
    """Invalid model specification."""


class ConfigError(WciLabError, ValueError):
    """Invalid configuration value."""


class DomainError(WciLabError, ValueError):
    """An argument lies outside the domain of the operation."""


class SizeError(WciLabError, ValueError):
    """A layer is too large for the requested exact computation."""


class ContractError(WciLabError, ValueError):
    """A caller violated an operation's precondition."""


class FormatError(WciLabError, ValueError):
    """A file does not follow the expected binary or text format."""


class ConsistencyError(WciLabError, ValueError):
    """Two related inputs disagree (e.g. image and label counts)."""


class CheckpointError(WciLabError, OSError):
    """A checkpoint file could not be loaded."""
