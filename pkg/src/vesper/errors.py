"""Exception taxonomy.

Every error the library raises deliberately derives from VesperError so the
CLI can map failures onto its two exit codes: usage/contract problems (2)
and I/O or parse problems (3).
"""


class VesperError(Exception):
    """Base class for all deliberate errors."""

    exit_code = 2


class ShapeMismatch(VesperError):
    """Operands have incompatible shapes. Message carries both shapes."""


class ContractViolation(VesperError):
    """A documented precondition was broken by the caller."""


class NonFiniteValues(VesperError):
    """A computation produced NaN or Inf."""


class ConfigError(VesperError):
    """Config file is malformed, has unknown keys, or fails validation."""


class IOFailure(VesperError):
    """File-level I/O and parse errors."""

    exit_code = 3


class WavParseError(IOFailure):
    """Malformed WAV container. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedRate(IOFailure):
    """WAV file has a sample rate the pipeline does not accept."""


class ManifestError(IOFailure):
    """Dataset manifest is malformed or references missing files."""


class CheckpointError(IOFailure):
    """Checkpoint file is malformed or fails its integrity check.

    ``offset`` points at the failing byte when that is meaningful.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CompletenessError(CheckpointError):
    """A checkpoint load left parameters unfilled or had extras left over.

    Carries the offending names so callers can print an actionable list.
    """

    def __init__(self, missing, unexpected):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = []
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        super().__init__("; ".join(parts) or "incomplete load")
