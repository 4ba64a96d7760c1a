"""Exception hierarchy shared by every module."""


class AlignError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AlignError, ValueError):
    pass


class ShapeError(AlignError, ValueError):
    pass


class VocabRangeError(AlignError, IndexError):
    pass


class CapacityError(AlignError, ValueError):
    """Sequence budget (patches + prompt + new tokens) exceeds max_seq_len."""


class ConfigError(AlignError, ValueError):
    pass


class ValidationError(AlignError, ValueError):
    """A manifest or record failed schema validation."""


class DegenerateInputError(AlignError, ValueError):
    """Zero-norm vectors reached a cosine computation."""


class DegenerateOutputError(AlignError):
    """Generation produced no tokens; callers usually skip the sample."""


class CheckpointError(AlignError):
    pass


class TrainingAborted(AlignError, RuntimeError):
    pass


class RewardParseError(AlignError, ValueError):
    pass
