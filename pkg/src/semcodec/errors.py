"""Exception types shared across the package."""


class CodecError(Exception):
    """Base class for all semcodec errors."""


class AudioFormatError(CodecError):
    """Unreadable or unsupported audio file encoding."""


class ConfigurationError(CodecError):
    """Parameters violate an operation's preconditions (non-COLA pair, bad strides, ...)."""


class ConfigValidationError(CodecError):
    """A run configuration violates one or more invariants.

    Carries every violation so the caller sees the full list at once.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {v}" for v in self.violations))


class CheckpointVersionError(CodecError):
    """Checkpoint or token-file format version does not match this build."""


class TrainingDiverged(CodecError):
    """A loss went non-finite; carries a reference to the last good checkpoint if any."""

    def __init__(self, message, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        super().__init__(message)


class MetricAdapterError(CodecError):
    """An external metric adapter failed; stdout/stderr are preserved verbatim."""

    def __init__(self, metric, message, stdout="", stderr=""):
        self.metric = metric
        self.stdout = stdout
        self.stderr = stderr
        super().__init__(f"metric adapter '{metric}' failed: {message}")
