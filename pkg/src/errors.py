# src/errors.py
"""
Error hierarchy shared by every stage. The CLI maps each class to an exit code.
"""


class ToolkitError(Exception):
    kind = "runtime"
    exit_code = 1


class ConfigError(ToolkitError, ValueError):
    kind = "config"
    exit_code = 4


class ShapeError(ToolkitError, ValueError):
    kind = "shape"


class TokenRangeError(ToolkitError, ValueError):
    kind = "token_range"


class SequenceTooLongError(ToolkitError, ValueError):
    kind = "sequence_length"


class CorpusTooShortError(ToolkitError, ValueError):
    kind = "corpus_too_short"


class TrimError(ToolkitError, ValueError):
    kind = "trim"


class CheckpointError(ToolkitError):
    kind = "checkpoint"
    exit_code = 5


class MissingDependencyError(ToolkitError):
    kind = "missing_dependency"
    exit_code = 6


class DivergenceError(ToolkitError):
    kind = "divergence"

    def __init__(self, message: str, step: int = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
