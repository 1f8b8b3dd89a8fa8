"""Exception hierarchy for the dreamforge engine.

Every error raised deliberately by the engine derives from DreamforgeError.
OS-level failures (permissions, disk full, missing files) are left as the
stdlib OSError family.
"""


class DreamforgeError(Exception):
    """Base class for engine errors."""


# session


class LockHeld(DreamforgeError):
    """Another live session owns the output folder."""


class IncompatibleFormat(DreamforgeError):
    """Session folder was written by a newer engine format."""


class EmptyName(DreamforgeError):
    """Step name is empty or normalizes to nothing."""


class NotASession(DreamforgeError):
    """Path is not a session folder."""


class SessionLocked(DreamforgeError):
    """Operation requires the session not to be live."""


# dataset


class SchemaMismatch(DreamforgeError):
    """Record does not match the declared columns."""


class HashMismatch(DreamforgeError):
    """Stored content hash does not match the data on disk (corruption)."""


class EmptySchema(DreamforgeError):
    """No schema can be derived (e.g. concat of zero datasets)."""


# fingerprint


class DepthExceeded(DreamforgeError):
    """Canonical value nesting is too deep."""


# step


class StepFailed(DreamforgeError):
    """Step execution failed; partial output is retained for resume."""


class UncacheableWithoutLogicKey(DreamforgeError):
    """Step has non-serializable logic and no logic_key was supplied."""


class NameConflict(DreamforgeError):
    """Step name is already in use by a live or reserved step."""


class MissingExamples(DreamforgeError):
    """Few-shot step requires a non-empty examples list."""


# model


class ReplayMiss(DreamforgeError):
    """Replay mode found no cached completion for a prompt."""


class ProviderError(DreamforgeError):
    """Model provider failed (after retries, where retryable)."""

    def __init__(self, message: str, error_class: str = "server_error"):
        super().__init__(message)
        self.error_class = error_class


class AuthMissing(DreamforgeError):
    """API key environment variable is not set."""


# trainer


class TrainerFailed(DreamforgeError):
    """Trainer execution failed."""


class CheckpointMismatch(DreamforgeError):
    """Checkpoint belongs to a different training dataset."""


# provenance


class IncompleteAncestry(DreamforgeError):
    """An ancestor's folder is missing from the session."""
