"""Exception types shared across the package."""


class InkgardenError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(InkgardenError, ValueError):
    pass


class ConfigurationError(InkgardenError, ValueError):
    pass


class NonFiniteError(InkgardenError, FloatingPointError):
    """NaN or Inf detected; carries the offending tensor/parameter name."""


class EmptyContextError(InkgardenError, ValueError):
    pass


class TimestepError(InkgardenError, ValueError):
    pass


class SamplerStateError(InkgardenError, RuntimeError):
    pass


class ContractViolationError(InkgardenError, RuntimeError):
    pass


class DegenerateMaskError(InkgardenError, ValueError):
    pass


class InvalidImageError(InkgardenError, ValueError):
    pass


class ManifestError(InkgardenError, ValueError):
    pass


class DuplicateRecordError(ManifestError):
    pass


class VocabularyError(InkgardenError, ValueError):
    pass


class AdapterTargetError(InkgardenError, ValueError):
    pass


class AdapterStateError(InkgardenError, RuntimeError):
    pass


class FrozenParameterError(InkgardenError, RuntimeError):
    pass


class CheckpointError(InkgardenError, RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class ModelStateError(InkgardenError, RuntimeError):
    pass
