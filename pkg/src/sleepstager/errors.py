"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: ValidationError -> 2,
file-format problems and OSError -> 1, NumericalError -> 3.
"""


class ValidationError(ValueError):
    """Inputs violate a documented precondition or invariant."""


class FormatError(ValueError):
    """A container file is not in the expected format (bad magic, version...)."""


class CorruptionError(FormatError):
    """A container file is structurally damaged (e.g. truncated)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointVersionError(FormatError):
    """Checkpoint was written by an incompatible format version."""


class NumericalError(RuntimeError):
    """Training or evaluation produced non-finite values."""
