"""Exception types raised across the package."""


class CompMetaError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CompMetaError, ValueError):
    pass


class NonFiniteLogits(CompMetaError, ValueError):
    pass


class NonPositiveSigma(CompMetaError, ValueError):
    pass


class UnnormalizedWeights(CompMetaError, ValueError):
    pass


class UOutOfRange(CompMetaError, ValueError):
    pass


class DegenerateWeights(CompMetaError, RuntimeError):
    """Every particle has zero likelihood at a feedback step."""


class GuidedWithoutFeedback(CompMetaError, ValueError):
    pass


class MissingTaskId(CompMetaError, ValueError):
    pass


class RunLongerThanDuration(CompMetaError, ValueError):
    pass


class LengthMismatch(CompMetaError, ValueError):
    pass


class IoFailure(CompMetaError, OSError):
    pass


class ManifestChecksumMismatch(CompMetaError, ValueError):
    pass


class ConfigVersionMismatch(CompMetaError, ValueError):
    pass


class DivergenceDetected(CompMetaError, RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the path of the last good checkpoint, if one was written.
    """

    def __init__(self, message, iteration=None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint
