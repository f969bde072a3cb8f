"""Exception types shared across the toolkit."""


class KnmtError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(KnmtError):
    """Operand shapes do not conform to an operation's shape rule."""


class NumericError(KnmtError):
    """A NaN or Inf was produced while numeric checking is enabled."""


class ContractError(KnmtError):
    """A caller violated an operation's precondition."""


class VocabularyError(KnmtError):
    """A token id is outside the vocabulary."""


class ConfigError(KnmtError):
    """An invalid or inconsistent configuration was supplied."""


class CheckpointError(KnmtError):
    """A checkpoint file is missing, corrupt, or incompatible."""
