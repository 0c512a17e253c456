"""Exception taxonomy shared across the package."""


class SweepFusionError(Exception):
    """Base class for all package-specific failures."""


class FrequencyOrderError(SweepFusionError):
    """The slow sensor was given a higher frequency than the fast one."""


class PolicyError(SweepFusionError):
    """A fusion policy parameter is outside its valid range."""


class StreamNotWarmError(SweepFusionError):
    """Not enough sweeps buffered to satisfy the requested operation."""


class TimeRangeError(SweepFusionError):
    """A timestamp falls outside the valid simulation window."""


class GenerationError(SweepFusionError):
    """Random scenario generation could not satisfy placement constraints."""


class StructuralError(SweepFusionError):
    """Input frames violate a structural precondition (count, adjacency, window)."""


class DegenerateGeometryError(SweepFusionError):
    """Geometry input is degenerate (zero area, collinear points)."""


class UndefinedAPError(SweepFusionError):
    """Average precision is undefined (no ground truth in the dataset)."""


class CalibrationError(SweepFusionError):
    """Calibration received no usable training data."""


class ParameterError(SweepFusionError):
    """A numeric parameter is outside its valid range."""


class ConfigError(SweepFusionError):
    """A configuration document is malformed or contains unknown keys."""
