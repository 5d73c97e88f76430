"""Exception hierarchy shared across the package.

Grouped into families so the CLI can map each family to a distinct
exit code: file-format problems, data-validation problems, and
engine/numerics problems.
"""


class MemclfError(Exception):
    """Base class for all package errors."""


# --- file format family -------------------------------------------------

class FormatError(MemclfError):
    """A binary or manifest file is structurally invalid."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class Truncated(FormatError):
    pass


class MalformedFile(FormatError):
    pass


# --- validation family --------------------------------------------------

class ValidationError(MemclfError):
    """Data violates a declared invariant."""


class NotNormalized(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class ShotCountMismatch(ValidationError):
    pass


class ViewGroupsUnsorted(ValidationError):
    pass


# --- engine family ------------------------------------------------------

class EngineError(MemclfError):
    """A runtime failure inside the adaptation engine."""


class EmptyBank(EngineError):
    def __init__(self, class_index: int | None = None):
        self.class_index = class_index
        detail = "" if class_index is None else f" for class {class_index}"
        super().__init__(f"readout bank is empty{detail}")


class DegenerateProjection(EngineError):
    pass


class DegenerateAggregate(EngineError):
    pass


class NoActiveSource(EngineError):
    pass


class NumericalFailure(EngineError):
    pass


class ModeRequirementError(EngineError):
    """A run mode was requested without the inputs it needs."""
