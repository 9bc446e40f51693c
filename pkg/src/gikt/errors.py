"""Exception types shared across the package."""


class GiktError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GiktError):
    """Tensor dimensions do not line up for the requested operation."""


class ContractError(GiktError):
    """A caller violated an operation's contract (non-scalar loss, empty tape, ...)."""


class ConfigError(GiktError):
    """A configuration value is missing, unknown, or out of range."""


class FormatError(GiktError):
    """An input file does not match its declared format."""


class SplitError(GiktError):
    """The dataset cannot be split as requested."""


class EmptySelectionError(GiktError):
    """A selection operation was left with nothing to select from."""


class NumericError(GiktError):
    """A numeric contract was violated (NaN gradient, probability out of range)."""


class GraphError(GiktError):
    """The question-skill graph cannot be built or is inconsistent."""


class CheckpointError(GiktError):
    """A checkpoint file is missing, malformed, or incompatible."""


class UndefinedMetricError(GiktError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
