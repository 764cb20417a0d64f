"""Exception types raised across the package."""


class PatchDropoutError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PatchDropoutError, ValueError):
    pass


class IndexOutOfRange(PatchDropoutError, IndexError):
    pass


class DuplicateIndex(PatchDropoutError, ValueError):
    pass


class IndivisibleImage(PatchDropoutError, ValueError):
    pass


class InvalidRate(PatchDropoutError, ValueError):
    pass


class IntervalInactive(PatchDropoutError, ValueError):
    pass


class DoubleDropout(PatchDropoutError, ValueError):
    pass


class BadMagic(PatchDropoutError, ValueError):
    pass


class TruncatedFile(PatchDropoutError, ValueError):
    pass


class LabelOutOfRange(PatchDropoutError, ValueError):
    pass


class DivergedLoss(PatchDropoutError, RuntimeError):
    pass


class SchemaMismatch(PatchDropoutError, ValueError):
    pass


class UsageError(PatchDropoutError):
    """Bad command-line usage; the CLI maps this to exit code 2."""
