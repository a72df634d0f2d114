"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class BasisFormatError(ValueError):
    """A basis file could not be parsed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BasisVersionError(ValueError):
    """A basis file declares an unsupported format version."""


class RenderError(RuntimeError):
    """Rendering failed (e.g. the whole face is behind the camera)."""


class FitError(RuntimeError):
    """Optimization could not be carried out."""


class ConfigError(ValueError):
    """Invalid configuration supplied to the CLI or harness."""
