class MIPError(Exception):
    """Base class for invariant violations raised by this package."""


class DimensionMismatchError(MIPError, ValueError):
    pass


class SamplerContractError(MIPError, ValueError):
    pass


class InsufficientImagesError(MIPError, ValueError):
    pass


class EmptyGalleryError(MIPError, ValueError):
    pass


class NoPositiveError(MIPError, ValueError):
    pass


class ZeroNormError(MIPError, ValueError):
    pass


class MissingClassifierError(MIPError, RuntimeError):
    pass


class CheckpointMismatchError(MIPError, RuntimeError):
    pass


class NaNLossError(MIPError, FloatingPointError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
