"""Exception types shared across the package."""


class Label2LabelError(Exception):
    pass


class ShapeMismatch(Label2LabelError, ValueError):
    pass


class DomainError(Label2LabelError, ValueError):
    pass


class AxisOutOfRange(Label2LabelError, IndexError):
    pass


class IndexOutOfRange(Label2LabelError, IndexError):
    pass


class NonScalarLoss(Label2LabelError, ValueError):
    pass


class NonFiniteLoss(Label2LabelError, FloatingPointError):
    pass


class ZeroLengthSequence(Label2LabelError, ValueError):
    pass


class MissingGradient(Label2LabelError, RuntimeError):
    pass


class BadImageShape(Label2LabelError, ValueError):
    pass


class StrategyMismatch(Label2LabelError, ValueError):
    pass


class GammaOutOfRange(Label2LabelError, ValueError):
    pass


class DegenerateAttribute(Label2LabelError, ValueError):
    pass


class KTooLarge(Label2LabelError, ValueError):
    pass


class TensorFormatError(Label2LabelError, ValueError):
    pass


class ManifestError(Label2LabelError, ValueError):
    pass


class LabelDomainError(Label2LabelError, ValueError):
    pass


class ConfigError(Label2LabelError, ValueError):
    pass


class IncompatibleCheckpoint(Label2LabelError, ValueError):
    pass


class SampleNotFound(Label2LabelError, KeyError):
    pass
