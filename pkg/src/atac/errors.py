"""Exception types raised across the package."""


class AtacError(Exception):
    pass


class ZeroVector(AtacError, ValueError):
    pass


class DimensionMismatch(AtacError, ValueError):
    pass


class TooFewViews(AtacError, ValueError):
    pass


class NotUnitNorm(AtacError, ValueError):
    pass


class UnsupportedKind(AtacError, ValueError):
    pass


class UnknownSuite(AtacError, KeyError):
    pass


class ShapeMismatch(AtacError, ValueError):
    pass


class NonFiniteOutput(AtacError, FloatingPointError):
    pass


class GradientUnsupported(AtacError, TypeError):
    pass


class MissingKey(AtacError, KeyError):
    pass


class InvalidGeometry(AtacError, ValueError):
    pass


class DegenerateHead(AtacError, ValueError):
    pass


class BadMagic(AtacError, ValueError):
    pass


class VersionUnsupported(AtacError, ValueError):
    pass


class TruncatedFile(AtacError, EOFError):
    pass


class NormOutOfRange(AtacError, ValueError):
    pass
