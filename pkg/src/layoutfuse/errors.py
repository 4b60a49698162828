"""Exception hierarchy shared by every layoutfuse module."""


class LayoutFuseError(Exception):
    """Base class for all library errors."""


class ContainerError(LayoutFuseError, ValueError):
    """Malformed, truncated or inconsistent tensor container."""


class SpecError(LayoutFuseError, ValueError):
    """Layout spec violates its schema.

    ``code`` identifies the violated rule (``missing-field``, ``box-degenerate``,
    ...) and ``field`` points at the offending JSON path.
    """

    def __init__(self, code: str, field: str, message: str):
        super().__init__(f"{field}: {message} [{code}]")
        self.code = code
        self.field = field


class ShapeError(LayoutFuseError, ValueError):
    """Operand shapes do not agree."""


class NumericError(LayoutFuseError, ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""


class WeightsError(LayoutFuseError, LookupError):
    """Requested layer/head weights are absent."""
