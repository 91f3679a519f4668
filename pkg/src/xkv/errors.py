"""Exception types shared across the engine."""


class XKVError(Exception):
    """Base class for all engine errors."""


class DimensionError(XKVError):
    """Operand shapes are incompatible."""


class ParameterError(XKVError):
    """A scalar argument is out of its valid range."""


class MaskError(XKVError):
    """A softmax row has no unmasked entry."""


class ProtocolError(XKVError):
    """Cache mutation violates the streaming protocol (e.g. non-monotonic frame)."""


class InvariantViolationError(XKVError):
    """A selection would drop always-retained tokens or corrupt cache bookkeeping."""


class EmptyCacheError(XKVError):
    """Read attempted on a cache layer holding no tokens."""


class BudgetInfeasibleError(XKVError):
    """The token budget cannot hold the always-retained first and current frames."""


class CorruptionError(XKVError):
    """Stored data is internally inconsistent (bad codes, K/V length mismatch)."""
