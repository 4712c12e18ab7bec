"""Exception types shared across the package.

Subclasses of ValueError signal invalid inputs (rejected states, malformed
files); subclasses of RuntimeError signal failures arising during a
computation that started from valid inputs.
"""


class GeometryDomainError(ValueError):
    """Input outside the mathematical domain of an operation (boundary point,
    non-finite entry, invalid simplex row)."""


class AssemblyError(ValueError):
    """Operator assembly rejected a metric field; carries the offending node."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class FormatError(ValueError):
    """Malformed on-disk data; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Flow state left the representable domain; carries the last valid time."""

    def __init__(self, message: str, last_time: float | None = None):
        if last_time is not None:
            message = f"{message} (last valid time t={last_time:g})"
        super().__init__(message)
        self.last_time = last_time


class StepUnderflowError(RuntimeError):
    """Adaptive step controller drove the step size below the representable
    minimum."""


class CapabilityError(RuntimeError):
    """Requested computation exceeds a guarded resource limit."""
