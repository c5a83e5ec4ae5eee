"""Exception hierarchy shared across deployforge modules."""

from __future__ import annotations


class DeployForgeError(Exception):
    """Base class for all deployforge errors."""


# --- guideline ---------------------------------------------------------------

class ParseError(DeployForgeError):
    """Malformed guideline or scenario document."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class ValidationError(DeployForgeError):
    """A structural invariant of a parsed document is violated."""

    def __init__(self, message: str, step_id: str | None = None):
        self.step_id = step_id
        super().__init__(message)


class UnsupportedVersion(DeployForgeError):
    """Document declares a schema_version this build does not know."""


class MissingBinding(DeployForgeError):
    """A template references a variable with no binding."""

    def __init__(self, names: list[str]):
        self.names = names
        super().__init__(f"missing bindings for: {', '.join(sorted(names))}")


class IllegalSubstitution(DeployForgeError):
    """A substituted value would corrupt the template it lands in."""


# --- sandbox -----------------------------------------------------------------

class SandboxRootUnwritable(DeployForgeError):
    pass


class RunIdCollision(DeployForgeError):
    pass


class SandboxViolation(DeployForgeError):
    """A step attempted to resolve a path outside its workspace."""


# --- runner ------------------------------------------------------------------

class UnknownRun(DeployForgeError):
    pass


class WorkspaceMissing(DeployForgeError):
    pass


class ApprovalTimeout(DeployForgeError):
    pass


# --- knowledge ---------------------------------------------------------------

class StorageFull(DeployForgeError):
    pass


class CorruptLedger(DeployForgeError):
    """A non-trailing ledger line failed validation."""


# --- llm gateway -------------------------------------------------------------

class LlmUnavailable(DeployForgeError):
    """The model endpoint could not be reached after retries."""


class TranscriptMismatch(DeployForgeError):
    """Replay-mode request digest differs from the recorded one."""

    def __init__(self, expected: str, got: str):
        self.expected = expected
        self.got = got
        super().__init__(f"transcript mismatch: expected digest {expected}, got {got}")


class MalformedToolCall(DeployForgeError):
    """Tool-call arguments did not parse against the requested schema."""


# --- packager ----------------------------------------------------------------

class NotSucceeded(DeployForgeError):
    """Packaging requires a transcript whose outcome is succeeded."""


class NoEntrypointDerivable(DeployForgeError):
    """Guideline declares no agent metadata and no usable verify step."""
