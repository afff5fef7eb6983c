"""Exception taxonomy shared across the package."""


class SplatflowError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SplatflowError):
    """Non-finite or otherwise unusable numeric input."""


class DegenerateRotationError(SplatflowError):
    """Quaternion too close to zero to normalize."""


class InvalidConfigError(SplatflowError):
    """Configuration value outside its documented domain."""


class ShapeMismatchError(SplatflowError):
    """Array shapes inconsistent with each other or with a header."""


class MissingTapeError(SplatflowError):
    """Backward pass requested without a recorded forward pass."""


class DegenerateSceneError(SplatflowError):
    """Training state collapsed (e.g. no dynamic Gaussians left)."""


class DegenerateModelError(SplatflowError):
    """Model cannot answer the query (e.g. tracking with no dynamic Gaussians)."""


class DivergenceError(SplatflowError):
    """Non-finite loss during training."""

    def __init__(self, iteration, term, value):
        self.iteration = iteration
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss at iteration {iteration}: {term}={value}")


class DatasetError(SplatflowError):
    """Base class for dataset / file-format problems."""


class MissingFileError(DatasetError):
    """Referenced file does not exist."""


class VersionError(DatasetError):
    """Unsupported format version."""


class ManifestError(DatasetError):
    """Manifest violates one of its invariants."""
