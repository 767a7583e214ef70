"""Exception hierarchy shared across the toolkit."""


class FireSmokeError(Exception):
    """Base class for all toolkit errors."""


class InvalidBoxError(FireSmokeError, ValueError):
    pass


class InvalidWeightsError(FireSmokeError, ValueError):
    pass


class ProtocolError(FireSmokeError, ValueError):
    """Inputs violate an evaluation protocol (mixed image ids, negative counts...)."""


class SchemaError(FireSmokeError, ValueError):
    """A record names an unknown class or has malformed fields."""


class ConfigurationError(FireSmokeError, ValueError):
    """Shapes, channel counts or config values do not agree."""


class IngestError(FireSmokeError):
    """A dataset file could not be read or decoded."""


class NumericError(FireSmokeError, FloatingPointError):
    """NaN or infinity surfaced in a computation."""


class TrainingDivergedError(NumericError):
    pass
