"""Exception types raised across the package."""


class SpotPatchError(Exception):
    pass


class DimensionError(SpotPatchError, ValueError):
    """Operand shapes do not conform."""


class ArgumentError(SpotPatchError, ValueError):
    """An argument value is outside its valid domain."""


class ConfigurationError(SpotPatchError, ValueError):
    """Mode, state or model layout are inconsistent."""


class GraphError(SpotPatchError, RuntimeError):
    """Invalid use of the autodiff graph (e.g. a second backward pass)."""


class RunError(SpotPatchError, RuntimeError):
    """Training diverged.

    Attributes:
        step: index of the optimizer step at which the loss became non-finite.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(SpotPatchError, ValueError):
    """Malformed ``.sptp`` byte stream.

    Attributes:
        offset: byte offset at which decoding failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
