"""Exception hierarchy shared by every module of the package."""


class ElEnhanceError(Exception):
    pass


class ConfigError(ElEnhanceError):
    pass


class IoError(ElEnhanceError, OSError):
    pass


class InvalidSymbol(ElEnhanceError, ValueError):
    pass


class EmptyInput(ElEnhanceError, ValueError):
    pass


class InvalidSpeechType(ElEnhanceError, ValueError):
    pass


class InputTooShort(ElEnhanceError, ValueError):
    pass


class InvalidInput(ElEnhanceError, ValueError):
    pass


class ShapeError(ElEnhanceError, ValueError):
    pass


class EmptyBatch(ElEnhanceError, ValueError):
    pass


class RangeError(ElEnhanceError, ValueError):
    pass


class EmptyReference(ElEnhanceError, ValueError):
    pass


class InsufficientVoicing(ElEnhanceError, ValueError):
    pass


class StaleArtifact(ElEnhanceError):
    pass


class StageFailure(ElEnhanceError):
    """Raised by the orchestrator; ``stage`` names the step that failed."""

    def __init__(self, stage: str, cause: BaseException | None = None):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause!r}")
