"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: data/validation problems exit 2,
numeric failures (non-finite values, failed gradient checks) exit 3.
"""


class SpotAttnError(Exception):
    """Base class for all package errors."""


class ShapeError(SpotAttnError):
    """Operands have incompatible shapes."""


class DegenerateRowError(SpotAttnError):
    """A softmax row has no unmasked entries."""


class RankDeficiencyError(SpotAttnError):
    """Point correspondences are collinear or otherwise rank-deficient."""


class CapacityError(SpotAttnError):
    """More neighbors requested than keys available."""


class InsufficientSpotsError(SpotAttnError):
    """An operation needs more spots than were given."""


class TapeStateError(SpotAttnError):
    """Backward pass invoked on a tape with no recorded forward."""


class DataError(SpotAttnError):
    """Base class for data and configuration problems (CLI exit 2)."""


class FormatError(DataError):
    """Malformed container file (bad magic, version, or truncation)."""


class ValidationError(DataError):
    """Payload violates a record invariant (e.g. NaN values)."""


class ConfigError(DataError):
    """A configuration violates one of its invariants."""


class MetricsError(DataError):
    """Metrics are undefined for the given inputs."""


class NumericError(SpotAttnError):
    """Base class for numeric failures (CLI exit 3)."""


class OptimizerError(NumericError):
    """Non-finite gradient reached the optimizer."""


class ProbeError(NumericError):
    """Objective became non-finite at a finite-difference probe point."""
