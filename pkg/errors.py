class IWAdversarialError(Exception):
    """Root of every error raised by the toolkit."""


class ShapeMismatchError(IWAdversarialError, ValueError):
    pass


class NumericDomainError(IWAdversarialError, ValueError):
    pass


class TapeReplayError(IWAdversarialError, RuntimeError):
    pass


class ModeMismatchError(IWAdversarialError, ValueError):
    """A discriminator was called with arguments that do not match its input mode."""


class TractabilityError(IWAdversarialError, ValueError):
    """An objective needs log q(z|x) but the encoder is implicit."""


class ConfigurationError(IWAdversarialError, ValueError):
    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


class NonFiniteLossError(IWAdversarialError, FloatingPointError):
    def __init__(self, message: str, step: int = -1, checkpoint_path: str = ""):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


class CheckpointFormatError(IWAdversarialError, ValueError):
    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field


class TraceFormatError(IWAdversarialError, ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(message)
        self.line = line


class EnumerationBudgetError(IWAdversarialError, ValueError):
    pass


class UndefinedStatisticError(IWAdversarialError, ValueError):
    pass


class DivergentWeightsError(IWAdversarialError, FloatingPointError):
    pass


class ReportFormatError(IWAdversarialError, ValueError):
    """A metric report is empty or cannot be parsed back into records."""
