"""Exception types shared across the package."""


class FallFusionError(Exception):
    pass


class DegenerateInput(FallFusionError, ValueError):
    pass


class ShapeMismatch(FallFusionError, ValueError):
    pass


class NoSignal(FallFusionError, ValueError):
    pass


class InsufficientData(FallFusionError, ValueError):
    pass


class ScriptError(FallFusionError, ValueError):
    pass


class SchemaError(FallFusionError, ValueError):
    pass


class InvalidLabel(FallFusionError, ValueError):
    pass


class SpecError(FallFusionError, ValueError):
    pass


class DivergenceError(FallFusionError, RuntimeError):
    pass


class NumericFault(FallFusionError, FloatingPointError):
    """NaN or Inf produced by a forward computation."""


class ProtocolError(FallFusionError, ValueError):
    pass


class CorruptFrame(ProtocolError):
    pass


class CheckpointError(FallFusionError, ValueError):
    pass
