"""
Error hierarchy for karyosim.

ValidationError subclasses describe bad inputs or configuration (CLI exit 1);
ProcessingError subclasses describe failures while processing valid inputs
(CLI exit 2).
"""


class KarySimError(Exception):
    """Base class for every karyosim error."""


class ValidationError(KarySimError):
    """Input or configuration rejected before processing."""


class ProcessingError(KarySimError):
    """Processing failed on otherwise valid input."""


# Validation errors

class ConfigInvalid(ValidationError):
    pass


class InvalidParameter(ValidationError):
    pass


class UnknownClass(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class TooSmall(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


class SequenceTooShort(ValidationError):
    pass


class DonorShapeMismatch(ValidationError):
    pass


# Processing errors

class EmptyMask(ProcessingError):
    pass


class MultipleComponents(ProcessingError):
    pass


class DegenerateSkeleton(ProcessingError):
    pass


class AxisTooShort(ProcessingError):
    pass


class DegenerateAxis(ProcessingError):
    pass


class NoDonorAvailable(ProcessingError):
    pass


class ZeroVariance(ProcessingError):
    pass


class NonFiniteLoss(ProcessingError):
    pass


class NoAbnormalSamples(ProcessingError):
    pass


class MissingArtifact(ProcessingError):
    pass
