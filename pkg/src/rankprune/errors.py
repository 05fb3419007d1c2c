"""Exception hierarchy shared across the toolkit."""


class CompressionError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class ContainerFormatError(CompressionError):
    """The tensor container is malformed: bad header, byte ranges, or payload."""


class MissingTensorError(ContainerFormatError):
    """An expected tensor is absent from a container."""


class ShapeMismatchError(CompressionError):
    """A tensor's shape disagrees with the model configuration."""


class DecompositionError(CompressionError):
    """The SVD backend failed to converge on a matrix."""


class AllocationError(CompressionError):
    """A parameter budget cannot be realized (too small even for rank 1)."""


class InfeasibleRatioError(CompressionError):
    """The requested model-level ratio cannot be absorbed by the layers."""


class CalibrationError(CompressionError):
    """Calibration data is missing, empty, or too short for the plan."""


class DataError(CompressionError):
    """A token stream or evaluation input is unusable."""


class ManifestError(CompressionError):
    """Manifest contents disagree with the weights they describe."""
