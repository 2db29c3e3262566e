"""Exception hierarchy shared by every gemmbench module."""


class GemmBenchError(Exception):
    """Base class for all harness errors."""


class ShapeError(GemmBenchError, ValueError):
    """Operand dimensions are incompatible."""


class SizeError(GemmBenchError, ValueError):
    """Requested matrix dimensions overflow the element budget."""


class FormatError(GemmBenchError, ValueError):
    """A GEMMMAT1 file is malformed."""


class MeasurementError(GemmBenchError):
    """A timing or energy measurement could not be taken."""


class CapabilityError(GemmBenchError):
    """A required host facility (counter, tool, permission) is unavailable."""


class CounterReadError(GemmBenchError, OSError):
    """An energy counter file could not be read or parsed."""


class BackendError(GemmBenchError):
    """An external backend failed to start, crashed, or timed out."""

    def __init__(self, message: str, diagnostics: str = ""):
        super().__init__(message)
        self.diagnostics = diagnostics


class ProtocolError(BackendError):
    """An external backend sent a malformed or unexpected message."""


class SchemaError(GemmBenchError, ValueError):
    """A persisted result row has an unsupported schema version or missing fields."""
