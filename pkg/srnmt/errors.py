"""Exception hierarchy shared by every srnmt module."""


class SrnmtError(Exception):
    """Base class for toolkit errors"""


class DimensionError(SrnmtError):
    pass


class ConfigurationError(SrnmtError):
    pass


class SchemaError(ConfigurationError):
    """Run configuration contains unknown or malformed keys"""

    def __init__(self, message: str, keys=None):
        super().__init__(message)
        self.keys = list(keys or [])


class InvalidMaskError(SrnmtError):
    pass


class ContractError(SrnmtError):
    pass


class VocabularyError(SrnmtError):
    pass


class EmptyBatchError(SrnmtError):
    pass


class DataError(SrnmtError):
    pass


class CorruptCheckpointError(SrnmtError):
    pass


class GradientExplosion(SrnmtError):
    """Non-finite loss or gradient observed during a training step"""

    def __init__(self, message: str, step: int = None):
        super().__init__(message)
        self.step = step


class GradCheckFailure(SrnmtError):
    def __init__(self, message: str, worst_parameter: str = None):
        super().__init__(message)
        self.worst_parameter = worst_parameter
