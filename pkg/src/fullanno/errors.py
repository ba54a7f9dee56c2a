"""Exception types shared across the engine."""


class FullannoError(Exception):
    """Base class for all engine errors."""


class InvariantViolation(FullannoError):
    """A record violates a structural invariant (dangling reference, bad geometry)."""


class SchemaError(FullannoError):
    """Input document does not match the expected schema.

    ``path`` is a JSONPath-ish locator ($.images, $.annotations[3].bbox) or a
    line number for JSONL inputs.
    """

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class IdCollision(FullannoError):
    """Two records claim the same identifier."""


class DegenerateBox(FullannoError):
    """Box has non-positive width or height."""


class UnknownSource(FullannoError):
    """Detection references a source_id with no configured priority."""


class EmptyCategory(FullannoError):
    """Category name is empty after trimming."""


class StageViolation(FullannoError):
    """Operation requires a pipeline stage that has not completed."""


class EmptyBundle(FullannoError):
    """Annotation bundle has neither objects nor captions."""


class ConfigError(FullannoError):
    """Bad pipeline configuration, or checkpoint/config mismatch."""


class ClientError(FullannoError):
    """Failure talking to an external model endpoint."""

    def __init__(self, message: str, retryable: bool = False, status: int | None = None):
        super().__init__(message)
        self.retryable = retryable
        self.status = status


class MalformedResponse(FullannoError):
    """Endpoint answered, but the payload does not match the wire contract."""


class EmptyResponse(FullannoError):
    """Endpoint answered with no usable content."""
