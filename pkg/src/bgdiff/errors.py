"""Exception types shared across the package."""


class BgDiffError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BgDiffError, ValueError):
    pass


class ShapeError(BgDiffError, ValueError):
    pass


class DegenerateInputError(BgDiffError, ValueError):
    pass


class ManifestError(BgDiffError):
    """Raised when a manifest cannot be parsed or references are dangling."""


class TrainingDivergedError(BgDiffError, RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class ExtractorGateError(BgDiffError, RuntimeError):
    pass
