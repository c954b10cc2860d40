class SLTError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SLTError, ValueError):
    pass


class EmptySequenceError(SLTError, ValueError):
    pass


class RankError(SLTError, ValueError):
    pass


class EvaluationError(SLTError, ArithmeticError):
    pass


class VocabularyError(SLTError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class InfeasibleTargetError(SLTError, ValueError):
    pass


class ConfigurationError(SLTError, ValueError):
    pass


class SequenceTooShortError(SLTError, ValueError):
    pass


class CheckpointRequiredError(SLTError, RuntimeError):
    pass


class PipelineOrderError(SLTError, RuntimeError):
    pass


class CorpusError(SLTError, ValueError):
    pass


class CheckpointError(SLTError, IOError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass
