"""Exception types shared across the package."""


class BiassegError(Exception):
    """Base class for all package errors."""


class ShapeError(BiassegError, ValueError):
    """Operands have incompatible or invalid shapes."""


class ConfigError(BiassegError, ValueError):
    """A configuration value is out of its supported range."""


class GraphError(BiassegError, RuntimeError):
    """Autodiff contract violation (e.g. backward from a non-scalar)."""


class ContractError(BiassegError, ValueError):
    """A caller violated an operation precondition."""


class VocabularyError(BiassegError, ValueError):
    """Token or concept not present in the model vocabulary."""


class InvalidPromptError(BiassegError, ValueError):
    """Prompt point lies outside the image bounds."""


class DatasetWriteError(BiassegError, OSError):
    """Failed to write dataset files."""


class DatasetReadError(BiassegError, OSError):
    """A referenced dataset file is missing or unreadable."""


class CorruptDataError(BiassegError, ValueError):
    """Stored data failed its checksum or structural validation."""


class CheckpointFormatError(BiassegError, ValueError):
    """Checkpoint file has a bad magic or unsupported version."""


class UndefinedMetricError(BiassegError, ValueError):
    """Metric is undefined for the given inputs (e.g. single-class AUC)."""


class DivergenceError(BiassegError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
