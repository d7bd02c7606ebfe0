"""Exception hierarchy shared across the package."""


class GacrError(Exception):
    """Base class for all package errors."""


class ConfigError(GacrError):
    """Invalid or inconsistent configuration."""


class ContractError(GacrError):
    """A caller violated an operation's precondition."""


class CorpusError(GacrError):
    """Corpus file missing or unusable."""


class NumericFault(GacrError):
    """Non-finite value produced during computation."""


class BackendError(GacrError):
    """Generation backend failed after exhausting retries."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class CheckpointError(GacrError):
    """Checkpoint file is corrupt or incompatible."""
