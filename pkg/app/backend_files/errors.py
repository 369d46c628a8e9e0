"""
Exception hierarchy shared by every engine module.

Every error carries the name of the module that raised it so the controller
and the CLI can report "ERROR [module]: message" without guessing.
"""


class LincirError(Exception):
    """Base class for all engine errors"""

    module = "lincir"

    def __init__(self, message: str, module: str = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def describe(self) -> str:
        return f"{self.module}: {self}"


# ---------------- numeric-core ----------------

class ShapeMismatchError(LincirError, ValueError):
    module = "numeric-core"


class NonFiniteError(LincirError, FloatingPointError):
    module = "numeric-core"


class GraphError(LincirError):
    module = "numeric-core"


class FrozenParameterError(LincirError):
    module = "numeric-core"


# ---------------- text-pipeline ----------------

class NoKeywordsError(LincirError):
    module = "text-pipeline"


# ---------------- dual-encoder ----------------

class CorruptCheckpointError(LincirError):
    module = "dual-encoder"


# ---------------- smp-trainer ----------------

class InvalidNoiseSpecError(LincirError, ValueError):
    module = "smp-trainer"


class UnpairedCorpusError(LincirError):
    module = "smp-trainer"


# ---------------- retrieval-engine ----------------

class InvalidTemplateError(LincirError, ValueError):
    module = "retrieval-engine"


class PromptTooLongError(LincirError):
    module = "retrieval-engine"


class InvalidCutoffError(LincirError, ValueError):
    module = "retrieval-engine"


# ---------------- shared ----------------

class EmptyInputError(LincirError, ValueError):
    pass


class ConfigError(LincirError, ValueError):
    module = "cli"


class InputFileError(LincirError):
    """A corpus or benchmark file that cannot be opened or parsed"""
    module = "synth-bench"
