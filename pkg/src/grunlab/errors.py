"""Exception types shared across the package."""


class GrunlabError(Exception):
    """Base class for all package errors."""


class ShapeError(GrunlabError, ValueError):
    """Operand shapes are incompatible for an op."""


class DomainError(GrunlabError, ValueError):
    """An op was evaluated outside its mathematical domain."""


class ContractError(GrunlabError, ValueError):
    """A precondition of a public operation was violated."""


class ConfigError(GrunlabError, ValueError):
    """Invalid configuration values."""


class LengthError(GrunlabError, ValueError):
    """Input sequence longer than the model supports."""


class FormatError(GrunlabError, ValueError):
    """Malformed on-disk artifact (checkpoint or JSONL)."""


class DataError(GrunlabError, ValueError):
    """Inconsistent dataset splits."""


class CapacityError(GrunlabError, ValueError):
    """Requested more combinations than a generator can produce."""


class DegenerateDataError(GrunlabError, ValueError):
    """Data has no variance to analyse."""


class StageError(GrunlabError, RuntimeError):
    """A pipeline stage failed."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
