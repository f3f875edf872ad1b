"""Exception types raised across the engine."""


class SketchdError(Exception):
    """Base class for all errors raised by this package."""


class UnknownRelation(SketchdError):
    pass


class SchemaMismatch(SketchdError):
    pass


class TypeMismatch(SketchdError):
    pass


class KindMismatch(SketchdError):
    pass


class OutOfDomain(SketchdError):
    pass


class IllFormedDelta(SketchdError):
    """A delete exceeds the multiplicity available in the target relation."""


class InconsistentDelta(SketchdError):
    """A sketch or state update violates its own bookkeeping (maintenance bug)."""


class Overflow(SketchdError):
    """Integer aggregate left the 64-bit range."""


class RecaptureRequired(SketchdError):
    """A bounded operator buffer can no longer prove its result; rebuild the state."""


class EmptySketch(SketchdError):
    """The sketch holds no fragment for a partitioned relation of the plan."""


class DuplicateName(SketchdError):
    pass


class AlreadyCommitted(SketchdError):
    pass


class UnknownVersion(SketchdError):
    pass


class CorruptSnapshot(SketchdError):
    pass


class WorkloadError(SketchdError):
    """Malformed workload file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MismatchedWorkloads(SketchdError):
    pass
